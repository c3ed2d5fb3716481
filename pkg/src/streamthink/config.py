"""One JSON run configuration for every stage.

Keys are nested by stage (``data``, ``reward``, ``sft``, ``dapo``, ``eval``).
Dotted overrides such as ``dapo.steps=50`` patch any key; the values are
parsed as JSON when possible, so ``reward.terms=["a","f","s","u"]`` works.
"""
from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from .policy import CostModel
from .reward import RewardConfig
from .semantics import MECHANISMS
from .training import DapoConfig, SftConfig

OUTPUT_ROOT_ENV = "STREAMTHINK_OUTPUT_ROOT"

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "tick_s": 0.5,
    "min_window_s": 2.0,
    "token_cap": 48,
    "output_root": "runs",
    "data": {
        "n_records": 600,
        "n_val": 100,
        "mechanisms": list(MECHANISMS),
        "mechanism_weights": None,
        "open_ended_fraction": 0.0,
    },
    "reward": asdict(RewardConfig()),
    "sft": asdict(SftConfig()),
    "dapo": asdict(DapoConfig()),
    "eval": {
        "prefill_rate": 0.0,
        "generation_rate": 0.0,
        "n_resamples": 10_000,
        "group_by": "task_kind",
    },
}
DEFAULTS["reward"]["terms"] = list(DEFAULTS["reward"]["terms"])


def _merge(base: dict, patch: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in patch.items():
        if k not in out:
            raise KeyError(f"unknown config key {k!r}")
        if isinstance(out[k], dict) and isinstance(v, Mapping):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, overrides: Sequence[str]) -> dict:
    cfg = copy.deepcopy(cfg)
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = cfg
        parts = key.strip().split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise KeyError(f"unknown config key {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise KeyError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(raw)
    return cfg


@dataclass
class RunConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: Sequence[str] = ()) -> "RunConfig":
        cfg = copy.deepcopy(DEFAULTS)
        if path:
            cfg = _merge(cfg, json.loads(Path(path).read_text()))
        cfg = apply_overrides(cfg, overrides)
        rc = cls(cfg)
        rc.validate()
        return rc

    def validate(self) -> None:
        unknown = set(self.raw["data"]["mechanisms"]) - set(MECHANISMS)
        if unknown:
            raise ValueError(f"unknown mechanisms {sorted(unknown)}; choose from {list(MECHANISMS)}")
        # constructing the typed views runs their own checks
        self.reward_config(), self.sft_config(), self.dapo_config()

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def output_root(self) -> Path:
        return Path(os.environ.get(OUTPUT_ROOT_ENV) or self.raw["output_root"])

    def reward_config(self) -> RewardConfig:
        d = dict(self.raw["reward"])
        d["token_cap"] = self.raw["token_cap"]
        return RewardConfig.from_dict(d)

    def sft_config(self) -> SftConfig:
        return SftConfig(**{**self.raw["sft"], "seed": self.raw["sft"].get("seed", self.seed)})

    def dapo_config(self) -> DapoConfig:
        return DapoConfig.from_dict(self.raw["dapo"])

    def cost_model(self) -> CostModel:
        e = self.raw["eval"]
        return CostModel(float(e["prefill_rate"]), float(e["generation_rate"]))

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True) + "\n"
