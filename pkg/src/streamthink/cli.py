"""``streamthink`` command line: gen-data, train-sft, train-dapo, eval, report.

Every stage reads the same JSON config (``--config``), accepts dotted
``--set key=value`` overrides and writes under the output root
(``$STREAMTHINK_OUTPUT_ROOT`` wins over the config's ``output_root``).
The effective config is written next to every artifact.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig
from .datagen import export_dataset, generate_corpus, load_jsonl, prepare, validate_record
from .errors import SchemaViolation, TrainingAborted
from .evaluation import EvalConfig, REPORT_COLUMNS, report_rows, run_deployment, run_offline, summary_table, write_csv
from .policy import PolicyParams
from .training import train_dapo, train_sft

log = logging.getLogger("streamthink")


def _stage_dir(cfg: RunConfig, name: str) -> Path:
    d = cfg.output_root / name
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.json").write_text(cfg.to_json())
    return d


def _load_split(cfg: RunConfig, name: str) -> list:
    path = cfg.output_root / "data" / f"{name}.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run gen-data first")
    rows = load_jsonl(path)
    for i, r in enumerate(rows):
        validate_record(r, row=i)
    return [prepare(r, cfg.raw["tick_s"], cfg.raw["min_window_s"]) for r in rows]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def cmd_gen_data(cfg: RunConfig, args) -> int:
    d = cfg.raw["data"]
    records = generate_corpus(
        d["n_records"], cfg.seed, d["mechanisms"], d["mechanism_weights"],
        open_ended_fraction=d["open_ended_fraction"],
    )
    out = _stage_dir(cfg, "data")
    paths = export_dataset(records, out, n_val=d["n_val"], extra_manifest={"config": cfg.raw})
    for name, p in sorted(paths.items()):
        print(f"{name}: {p} sha256={_sha256(p)[:16]}")
    return 0


def cmd_train_sft(cfg: RunConfig, args) -> int:
    items = _load_split(cfg, "sft_train")
    init = PolicyParams.load(args.init) if args.init else PolicyParams.zeros()
    params, curve = train_sft(init, items, cfg.sft_config())
    out = _stage_dir(cfg, "sft")
    with (out / "sft_curve.jsonl").open("w") as f:
        for row in curve:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    params.save(out / "policy.json", extra={"config": cfg.raw, "init": args.init})
    print(f"sft: {len(curve)} steps, loss {curve[0]['loss']:.4f} -> {curve[-1]['loss']:.4f}, "
          f"token accuracy {curve[-1]['token_accuracy']:.3f}")
    return 0


def cmd_train_dapo(cfg: RunConfig, args) -> int:
    items = _load_split(cfg, "dapo_train")
    init_path = Path(args.init) if args.init else cfg.output_root / "sft" / "policy.json"
    init = PolicyParams.load(init_path)
    out = _stage_dir(cfg, "dapo")
    try:
        params, records = train_dapo(
            init, items, cfg.dapo_config(), reward_config=cfg.reward_config(), log_path=out / "dapo_log.jsonl",
        )
    except TrainingAborted as exc:
        print(f"train-dapo aborted: {exc}", file=sys.stderr)
        return 3
    params.save(out / "policy.json", extra={"config": cfg.raw, "init": str(init_path)})
    rewards = [r["mean_reward"] for r in records if r["mean_reward"] is not None]
    skipped = sum(r["groups_skipped"] for r in records)
    print(f"dapo: {len(records)} steps, mean reward {rewards[0]:.3f} -> {rewards[-1]:.3f}, skipped groups {skipped}")
    return 0


def _lanes(cfg: RunConfig, args) -> dict[str, PolicyParams]:
    lanes = {"base": PolicyParams.zeros()}
    for name in ("sft", "dapo"):
        p = cfg.output_root / name / "policy.json"
        if p.exists():
            lanes[name] = PolicyParams.load(p)
    for spec in args.checkpoint or []:
        name, _, path = spec.partition("=")
        lanes[name] = PolicyParams.load(path)
    return lanes


def cmd_eval(cfg: RunConfig, args) -> int:
    items = _load_split(cfg, "sft_val")
    e = cfg.raw["eval"]
    ecfg = EvalConfig(cfg.cost_model(), cfg.reward_config(), e["group_by"])
    rows = []
    for lane, params in _lanes(cfg, args).items():
        rows += report_rows(lane, "deployment", run_deployment(params, items, ecfg),
                            n_resamples=e["n_resamples"], seed=cfg.seed, group_by=e["group_by"])
    rows += report_rows("any", "offline", run_offline(None, items, ecfg),
                        n_resamples=e["n_resamples"], seed=cfg.seed, group_by=e["group_by"])
    out = _stage_dir(cfg, "eval")
    write_csv(rows, out / "report.csv")
    table = summary_table(rows)
    (out / "summary.txt").write_text(table)
    print(table, end="")
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    path = Path(args.report) if args.report else cfg.output_root / "eval" / "report.csv"
    with path.open() as f:
        rows = [
            {k: (v if k in ("lane", "protocol", "task") else float(v)) for k, v in r.items()}
            for r in csv.DictReader(f)
        ]
    if rows and tuple(rows[0]) != REPORT_COLUMNS:
        print(f"unexpected columns in {path}", file=sys.stderr)
        return 2
    print(summary_table(rows), end="")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-sft": cmd_train_sft,
    "train-dapo": cmd_train_dapo,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="streamthink", description=__doc__.splitlines()[0].replace("``", ""))
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
        if name == "gen-data":
            p.add_argument("--mechanisms", nargs="+", help="restrict generation to these mechanisms")
            p.add_argument("-n", "--n-records", type=int)
        if name in ("train-sft", "train-dapo"):
            p.add_argument("--init", help="checkpoint to start from")
        if name == "eval":
            p.add_argument("--checkpoint", action="append", metavar="NAME=PATH", help="extra lane")
        if name == "report":
            p.add_argument("--report", help="report.csv to summarise")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if getattr(args, "mechanisms", None):
        overrides.append("data.mechanisms=" + json.dumps(args.mechanisms))
    if getattr(args, "n_records", None):
        overrides.append(f"data.n_records={args.n_records}")
    try:
        cfg = RunConfig.load(args.config, overrides)
    except (KeyError, ValueError) as exc:
        parser.error(str(exc))
    try:
        return COMMANDS[args.command](cfg, args)
    except SchemaViolation as exc:
        print(f"schema violation: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(str(exc), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
