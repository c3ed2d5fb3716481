"""Desk-scale wait/think/answer streaming controller lab."""
from .datagen import align_gold_trace, export_dataset, generate_corpus, generate_record, prepare, validate_record
from .evaluation import aggregate, bootstrap_ci, row_weighted_average, rtf_proxy, run_deployment, run_offline
from .policy import CostModel, PolicyParams, action_distribution, compose_think, featurize, log_prob_and_grad
from .reward import RewardConfig, RewardWeights, score_trajectory, total_reward
from .stream import Action, ActionKind, StreamTimeline, observe_incremental, observe_replay
from .trace import Trajectory, check_protocol, parse, serialize
from .training import ClipConfig, DapoConfig, SftConfig, dapo_loss, dynamic_sampling_gate, group_advantages, rollout_group, train_dapo, train_sft

__version__ = "0.1.0"
