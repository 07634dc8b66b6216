"""
Command-line entry point.

    adapterlab [--config FILE] [--preset NAME] [--seed N] [--out-dir DIR] [--workers N]
               <subcommand> [subcommand options] [--section.key=value ...]

Any config field can be overridden with ``--dotted.key=value`` (values parse as
JSON when they can). Failures exit nonzero and print one JSON error record on
stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import attack as atk
from . import harness as H
from .checkpoint import load_checkpoint, load_into, save_checkpoint
from .config import PRESETS, load_config
from .errors import AdapterLabError, ConfigError, UsageError
from .model import adapter_param_fraction, trainable_param_count
from .training import MODES, run_phase

log = logging.getLogger("adapterlab")

SWEEP_COMMANDS = {
    "sweep-seeds": "random_seed",
    "sweep-pretrain": "pretrain_iterations",
    "sweep-finetune": "finetune_epochs",
    "attack": "attack",
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adapterlab", description="Adapter vs full fine-tuning experiments.")
    p.add_argument("--config", help="JSON run configuration, merged over the preset")
    p.add_argument("--preset", default="desk", choices=PRESETS)
    p.add_argument("--seed", type=int, help="base seed (also the sweep seed_base)")
    p.add_argument("--out-dir", default="runs")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    for name, help_ in (("pretrain", "task-specific MLM pretraining"), ("finetune", "supervised fine-tuning")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--mode", choices=MODES, default="with_adapter")
        s.add_argument("--checkpoint", help="start from this checkpoint (full or partial)")
    s = sub.add_parser("eval", help="evaluate a checkpoint on the dev set")
    s.add_argument("--checkpoint", required=True)
    for name in ("sweep-seeds", "sweep-pretrain", "sweep-finetune"):
        s = sub.add_parser(name, help=f"{name.replace('-', ' ')} sweep")
        s.add_argument("--format", nargs="+", default=["json", "csv"], choices=["json", "csv"])
    s = sub.add_parser("attack", help="attack curve over pretraining checkpoints, or attack one checkpoint")
    s.add_argument("--checkpoint", help="attack this model instead of running the curve")
    s.add_argument("--format", nargs="+", default=["json", "csv"], choices=["json", "csv"])
    s = sub.add_parser("report", help="re-validate a report JSON and regenerate its CSVs")
    s.add_argument("report", help="path to a report JSON")
    s.add_argument("--format", nargs="+", default=["csv"], choices=["json", "csv"])
    return p


def _config(args, overrides) -> dict:
    cfg = load_config(args.config, args.preset, overrides)
    if args.seed is not None:
        cfg["seed"] = args.seed
        for sweep in cfg.get("sweeps", {}).values():
            sweep["seed_base"] = args.seed
    return cfg


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _run_single(kind: str, args, cfg: dict) -> dict:
    exp = H.Experiment(cfg)
    out = Path(args.out_dir)
    seed = int(cfg.get("seed", 0))
    model = exp.fresh_model(args.mode, H.derive_seed(seed, args.mode), exp.base_state(out))
    if args.checkpoint:
        load_into(model, args.checkpoint)
    if kind == "pretrain":
        phase = exp.phase("task_specific_pretrain", args.mode)
        tlog = run_phase(model, phase, exp.corpus_enc, seed=seed, masking=exp.masking(seed),
                         run_id=cfg.get("run_id", "run"), out_dir=out)
    else:
        phase = exp.phase("finetune", args.mode)
        tlog = run_phase(model, phase, exp.train_enc, seed=seed, run_id=cfg.get("run_id", "run"), out_dir=out)
    stem = f"{cfg.get('run_id', 'run')}-{phase.tag}-{args.mode}"
    path = save_checkpoint(model, out / f"{stem}-final.ckpt")
    log_path = out / f"{stem}-log.jsonl"
    log_path.unlink(missing_ok=True)
    tlog.write_jsonl(log_path)
    result = {"command": kind, "mode": args.mode, "checkpoint": str(path), "log": str(log_path),
              "iterations": tlog.iterations, "final_loss": tlog.losses[-1] if tlog.losses else None,
              "trainable_params": trainable_param_count(model)}
    if model.config.adapter is not None:
        result["adapter_param_fraction"] = adapter_param_fraction(model)
    if kind == "finetune":
        result["metrics"] = exp.evaluate(model)
    return result


def _run_sweep(command: str, args, cfg: dict) -> dict:
    exp = H.Experiment(cfg)
    name = SWEEP_COMMANDS[command]
    spec = H.sweep_spec_from_config(cfg, name)
    fn = H.SWEEPS[command][1]
    result = fn(exp, spec, workers=args.workers, out_dir=args.out_dir)
    paths = H.emit_report(result, args.out_dir, args.format, stem=command)
    return {"command": command, "run_count": result["run_count"], "files": [str(p) for p in paths],
            "summaries": {s["key"]: {"mean": s["mean"], "std": s["std"]} for s in result["summaries"]}}


def _run_attack_one(args, cfg: dict) -> dict:
    exp = H.Experiment(cfg)
    model = load_checkpoint(args.checkpoint)
    a = cfg.get("attack", {})
    summary = atk.attack_success_rate(exp.victim(model), exp.dev, exp.lexicon,
                                      a.get("max_substitution_frac", 1.0), a.get("max_examples"))
    path = atk.write_records(summary.records, Path(args.out_dir) / "attack-records.jsonl")
    return {"command": "attack", "rate": summary.rate, "attempted": summary.attempted,
            "skipped_misclassified": summary.skipped_misclassified, "records": str(path)}


def _run_report(args) -> dict:
    path = Path(args.report)
    if not path.exists():
        raise FileNotFoundError(f"report not found: {path}")
    try:
        result = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    paths = H.emit_report(result, args.out_dir, args.format, stem=path.stem)
    return {"command": "report", "files": [str(p) for p in paths]}


def dispatch(args, overrides) -> dict:
    if args.workers < 1:
        raise UsageError("--workers must be >= 1")
    if args.command == "report":
        if overrides:
            raise UsageError(f"report takes no config overrides (got {overrides})")
        return _run_report(args)
    cfg = _config(args, overrides)
    if args.command in ("pretrain", "finetune"):
        return _run_single(args.command, args, cfg)
    if args.command == "eval":
        exp = H.Experiment(cfg)
        return {"command": "eval", "metrics": exp.evaluate(load_checkpoint(args.checkpoint))}
    if args.command == "attack" and args.checkpoint:
        return _run_attack_one(args, cfg)
    return _run_sweep(args.command, args, cfg)


def error_record(exc: BaseException) -> dict:
    if isinstance(exc, AdapterLabError):
        return exc.to_record()
    kind = "io" if isinstance(exc, OSError) else "internal"
    return {"error": kind, "type": type(exc).__name__, "message": str(exc)}


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    bad = [x for x in extra if not (x.startswith("--") and "=" in x)]
    if bad:
        parser.error(f"unrecognised arguments: {' '.join(bad)} (overrides look like --section.key=value)")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _emit(dispatch(args, extra))
    except (AdapterLabError, OSError, ValueError, KeyError) as exc:
        print(json.dumps(error_record(exc), sort_keys=True), file=sys.stderr)
        return 2 if isinstance(exc, (ConfigError, UsageError)) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
