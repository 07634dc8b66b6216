"""
Experiment orchestration: seed restarts, pretraining-iteration sweeps,
fine-tuning-epoch sweeps and attack-success curves, with/without adapters.

Seed derivation (documented, and tested for injectivity):

* run seed ``r = seed_base + value_index * trials_per_value + trial`` drives data
  order, masking and dropout; both modes share it, so mode comparisons are
  paired.
* init seed ``= derive_seed(r, mode)`` draws adapter and classifier weights.
* sweeps that branch fine-tuning off checkpoints of one pretraining run
  pretrain with ``seed_base + trial``.

Every backbone starts from the same "pretrained" base state: a full-parameter
MLM run on a generic corpus, computed once per configuration and cached.
"""

from __future__ import annotations

import concurrent.futures as cf
import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import attack as atk
from .checkpoint import read_checkpoint, save_checkpoint
from .config import config_hash, section
from .data import (
    SynonymLexicon,
    SyntheticTaskSpec,
    TsvSchema,
    build_vocab,
    encode_corpus,
    encode_dataset,
    generate_synthetic,
    load_tsv,
    synthetic_lexicon,
    synthetic_vocab,
)
from .errors import ConfigError, DataError, UsageError
from .model import AdapterConfig, Model, ModelConfig, build_model
from .training import (
    MODES,
    Callback,
    MaskingPolicy,
    TrainPhase,
    default_metrics,
    evaluate,
    phase_from_dict,
    run_phase,
)

log = logging.getLogger(__name__)

AXES = ("random_seed", "pretrain_iterations", "finetune_epochs", "pretrain_checkpoint_x_finetune_epochs")
REPORT_SCHEMA = "report.schema.json"


def derive_seed(run_seed: int, mode: str) -> int:
    return int(np.random.SeedSequence([int(run_seed), MODES.index(mode) + 1, 0xADA]).generate_state(1)[0])


# -- experiment setup ---------------------------------------------------------------------


class Experiment:
    """Data, vocabulary, lexicon and model factory for one run configuration."""

    _base_cache: dict[str, dict[str, np.ndarray]] = {}

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.seed = int(cfg.get("seed", 0))
        data = section(cfg, "data")
        self.synthetic: SyntheticTaskSpec | None = None
        if data.get("train_tsv"):
            schema = TsvSchema(**data.get("schema", {}))
            self.train = load_tsv(data["train_tsv"], schema)
            if not data.get("dev_tsv"):
                raise ConfigError("data.dev_tsv is required alongside data.train_tsv")
            self.dev = load_tsv(data["dev_tsv"], schema)
            self.vocab = build_vocab(self.train.texts(), int(data.get("vocab_size", 2000)))
            self.corpus = self.train.texts()
            self.lexicon = SynonymLexicon.load(data["lexicon"]) if data.get("lexicon") else SynonymLexicon()
        elif data.get("synthetic"):
            self.synthetic = SyntheticTaskSpec(**data["synthetic"])
            task = generate_synthetic(self.synthetic)
            self.train, self.dev, self.corpus = task.train, task.dev, task.unlabeled_pretrain_corpus
            self.vocab = synthetic_vocab(self.synthetic)
            if data.get("lexicon"):
                self.lexicon = SynonymLexicon.load(data["lexicon"])
            else:
                self.lexicon = synthetic_lexicon(self.synthetic, int(data.get("lexicon_candidates", 3)))
        else:
            raise ConfigError("config.data needs either 'synthetic' or 'train_tsv'/'dev_tsv'")
        self.task_kind = self.train.task_kind
        self.regression = self.task_kind == "regression"
        self.num_labels = 1 if self.regression else self.train.num_labels
        mcfg = dict(section(cfg, "model"))
        self.max_seq_len = int(mcfg.get("max_seq_len", 32))
        self.train_enc = encode_dataset(self.train, self.vocab, self.max_seq_len)
        self.dev_enc = encode_dataset(self.dev, self.vocab, self.max_seq_len)
        self.corpus_enc = encode_corpus(self.corpus, self.vocab, self.max_seq_len)
        ev = cfg.get("eval", {})
        self.metric = ev.get("metric", "pearson" if self.regression else "accuracy")
        self.metrics = tuple(ev.get("metrics") or default_metrics(self.task_kind))
        if self.metric not in self.metrics:
            self.metrics = (self.metric,) + self.metrics

    # -- models --------------------------------------------------------------

    def model_config(self, mode: str) -> ModelConfig:
        m = dict(section(self.cfg, "model"))
        adapter = AdapterConfig(**self.cfg["adapter"]) if mode == "with_adapter" else None
        return ModelConfig(vocab_size=len(self.vocab), num_labels=self.num_labels, adapter=adapter, **m)

    def base_key(self) -> str:
        return config_hash(self.cfg, ("seed", "model", "data", "base_pretrain", "masking"))

    def base_state(self, cache_dir=None) -> dict[str, np.ndarray]:
        """State of the shared pretrained backbone (no adapters)."""
        key = self.base_key()
        if key in self._base_cache:
            return self._base_cache[key]
        path = Path(cache_dir) / f"base-{key}.ckpt" if cache_dir else None
        if path is not None and path.exists():
            state = read_checkpoint(path)[1]
        else:
            model = build_model(self.model_config("without_adapter"), self.seed)
            corpus = self.base_corpus()
            bp = self.cfg.get("base_pretrain", {})
            iters = int(bp.get("iterations", 0))
            if iters and corpus is not None:
                phase = phase_from_dict("task_specific_pretrain", "without_adapter",
                                        {"schedule": {"length": iters, "log_every": max(iters, 1)},
                                         "optimizer": bp.get("optimizer", {})})
                run_phase(model, phase, corpus, seed=self.seed, masking=self.masking(self.seed))
            elif iters:
                log.warning("no base corpus configured; the backbone stays at its random initialisation")
            state = model.state_dict()
            if path is not None:
                save_checkpoint(model, path)
        self._base_cache[key] = state
        return state

    def base_corpus(self):
        bp = self.cfg.get("base_pretrain", {})
        if bp.get("corpus"):
            lines = [ln for ln in Path(bp["corpus"]).read_text(encoding="utf-8").splitlines() if ln.strip()]
            return encode_corpus(lines, self.vocab, self.max_seq_len)
        if self.synthetic is None:
            return None
        n = int(bp.get("n_sentences", 4000))
        generic = replace(self.synthetic, seed=int(bp.get("corpus_seed", 1000003)) + self.synthetic.seed,
                          n_train=n, n_dev=0, noise_rate=0.0)
        return encode_corpus(generate_synthetic(generic).unlabeled_pretrain_corpus, self.vocab, self.max_seq_len)

    def fresh_model(self, mode: str, init_seed: int, base: dict[str, np.ndarray] | None = None) -> Model:
        """Pretrained backbone plus adapters/classifier drawn from ``init_seed``."""
        model = build_model(self.model_config(mode), self.seed)
        model.load_state_dict(self.base_state() if base is None else base, strict=False)
        model.reinit("*.adapter|classifier", init_seed)
        return model

    def masking(self, seed: int) -> MaskingPolicy:
        return MaskingPolicy(seed=seed, **self.cfg.get("masking", {}))

    def phase(self, kind: str, mode: str, **schedule) -> TrainPhase:
        sect = "pretrain" if kind == "task_specific_pretrain" else "finetune"
        d = json.loads(json.dumps(section(self.cfg, sect, mode)))
        d.setdefault("schedule", {}).update(schedule)
        objective = None if kind == "task_specific_pretrain" else ("regression" if self.regression else "classification")
        return phase_from_dict(kind, mode, d, objective)

    def evaluate(self, model: Model) -> dict[str, float]:
        return evaluate(model, self.dev_enc, self.metrics, self.regression)

    def victim(self, model: Model) -> atk.Victim:
        return atk.Victim(model, self.vocab, self.max_seq_len)


# -- sweep specification and summaries -------------------------------------------------------


def expand_values(v) -> tuple[int, ...]:
    if isinstance(v, dict):
        start, stop, step = int(v["start"]), int(v["stop"]), int(v.get("step", 1))
        if step <= 0:
            raise ConfigError("range step must be positive")
        return tuple(range(start, stop + 1, step))
    return tuple(int(x) for x in v)


@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: tuple[int, ...]
    trials_per_value: int = 1
    modes: tuple[str, ...] = MODES
    seed_base: int = 0
    checkpoints: tuple[int, ...] = ()
    finetune_epochs: int | None = None
    pretrain_iterations: int | None = None
    independent_runs: bool = False

    def __post_init__(self):
        object.__setattr__(self, "values", expand_values(self.values))
        object.__setattr__(self, "modes", tuple(self.modes))
        object.__setattr__(self, "checkpoints", tuple(int(c) for c in self.checkpoints))
        if self.axis not in AXES:
            raise ConfigError(f"axis must be one of {AXES} (got {self.axis!r})")
        if not self.values:
            raise ConfigError("sweep values must be non-empty")
        if any(b <= a for a, b in zip(self.values, self.values[1:])):
            raise ConfigError(f"sweep values must be strictly increasing: {self.values}")
        if self.trials_per_value < 1:
            raise ConfigError("trials_per_value must be >= 1")
        if not self.modes or any(m not in MODES for m in self.modes) or len(set(self.modes)) != len(self.modes):
            raise ConfigError(f"modes must be a non-empty subset of {MODES}")
        if self.is_product:
            if not self.checkpoints or any(b <= a for a, b in zip(self.checkpoints, self.checkpoints[1:])):
                raise ConfigError("fine-tuning sweeps need strictly increasing pretraining checkpoints")
            if min(self.values) < 1:
                raise ConfigError("fine-tuning epoch values must be >= 1")
        if min(self.values) < 0:
            raise ConfigError("sweep values must be non-negative")

    @property
    def is_product(self) -> bool:
        return self.axis in ("finetune_epochs", "pretrain_checkpoint_x_finetune_epochs")

    @classmethod
    def from_dict(cls, d: dict) -> "SweepSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def grid(self) -> list[tuple[int, ...]]:
        if self.is_product:
            return [(c, e) for c in self.checkpoints for e in self.values]
        return [(v,) for v in self.values]

    def run_seed(self, value_index: int, trial: int) -> int:
        return self.seed_base + value_index * self.trials_per_value + trial

    @property
    def expected_runs(self) -> int:
        return len(self.grid()) * self.trials_per_value * len(self.modes)


@dataclass
class DistributionSummary:
    n: int
    mean: float
    std: float
    sample_std: float
    min: float
    q1: float
    median: float
    q3: float
    max: float
    values: list[float]

    @classmethod
    def from_values(cls, values: Sequence[float]) -> "DistributionSummary":
        """Population std in ``std``; quartiles use linear interpolation."""
        if len(values) == 0:
            raise DataError("cannot summarise an empty distribution")
        arr = np.asarray(values, dtype=np.float64)
        q1, med, q3 = np.percentile(arr, [25, 50, 75])
        return cls(
            n=int(arr.size), mean=float(arr.mean()), std=float(arr.std()),
            sample_std=float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
            min=float(arr.min()), q1=float(q1), median=float(med), q3=float(q3), max=float(arr.max()),
            values=[float(v) for v in arr],
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DistributionSummary":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__})


# -- trial execution -----------------------------------------------------------------------


@dataclass(frozen=True)
class TrialUnit:
    """One pretraining run per mode, fine-tuned from each mark in ``tsp_marks``."""

    mode: str
    trial: int
    tsp_seed: int
    tsp_marks: tuple[int, ...]
    run_seeds: tuple[int, ...]
    ft_marks: tuple[int, ...]
    values: tuple[tuple, ...]
    attack: bool = False


class _EvalAtEpochs(Callback):
    def __init__(self, exp: Experiment, marks: Sequence[int]):
        self.exp, self.marks, self.out = exp, set(marks), {}

    def on_epoch_end(self, epoch, iteration, model):
        if epoch in self.marks:
            self.out[epoch] = self.exp.evaluate(model)


def run_unit(exp: Experiment, unit: TrialUnit, out_dir=None) -> list[dict]:
    mode = unit.mode
    init_seed = derive_seed(unit.tsp_seed, mode)
    model = exp.fresh_model(mode, init_seed)
    top = max(unit.tsp_marks)
    if top > 0:
        phase = exp.phase("task_specific_pretrain", mode, length=top, checkpoint_at=list(unit.tsp_marks))
        snapshots = run_phase(model, phase, exp.corpus_enc, seed=unit.tsp_seed,
                              masking=exp.masking(unit.tsp_seed), keep_snapshots=True).snapshots
    else:
        snapshots = {0: model.state_dict()}

    rows = []
    ft_marks = tuple(sorted(unit.ft_marks))
    k = 0
    for mark, run_seed in zip(unit.tsp_marks, unit.run_seeds):
        ft_model = exp.fresh_model(mode, init_seed)
        ft_model.load_state_dict(snapshots[mark])
        ft_model.reinit("classifier", derive_seed(run_seed, mode))
        evals = _EvalAtEpochs(exp, ft_marks)
        phase = exp.phase("finetune", mode, length=max(ft_marks), unit="epochs")
        run_phase(ft_model, phase, exp.train_enc, seed=run_seed, callbacks=[evals])
        for epochs in ft_marks:
            row = {"mode": mode, "trial": unit.trial, "value": list(unit.values[k]), "run_seed": run_seed,
                   "tsp_seed": unit.tsp_seed, "init_seed": init_seed, "pretrain_iterations": mark,
                   "finetune_epochs": epochs, "metrics": evals.out[epochs]}
            k += 1
            rows.append(row)
        if unit.attack:
            summary = atk.attack_success_rate(exp.victim(ft_model), exp.dev, exp.lexicon,
                                              exp.cfg.get("attack", {}).get("max_substitution_frac", 1.0),
                                              exp.cfg.get("attack", {}).get("max_examples"))
            rel = None
            if out_dir is not None:
                rel = f"attack/{mode}-{mark}-t{unit.trial}.jsonl"
                atk.write_records(summary.records, Path(out_dir) / rel)
            rows[-1]["attack"] = {"rate": summary.rate, "successes": summary.successes,
                                  "attempted": summary.attempted, "skipped_misclassified": summary.skipped_misclassified,
                                  "records_file": rel}
    return rows


_worker_exp: Experiment | None = None


def _worker_init(cfg: dict, base: dict[str, np.ndarray]) -> None:
    global _worker_exp
    _worker_exp = Experiment(cfg)
    Experiment._base_cache[_worker_exp.base_key()] = base


def _worker_run(unit: TrialUnit, out_dir) -> list[dict]:
    return run_unit(_worker_exp, unit, out_dir)


def execute(exp: Experiment, units: Sequence[TrialUnit], workers: int = 1, out_dir=None) -> list[dict]:
    """Run units (in any order) and return rows sorted by trial key."""
    base = exp.base_state(out_dir)
    if workers <= 1 or len(units) <= 1:
        rows = [r for u in units for r in run_unit(exp, u, out_dir)]
    else:
        with cf.ProcessPoolExecutor(max_workers=workers, initializer=_worker_init,
                                    initargs=(exp.cfg, base)) as pool:
            futures = {pool.submit(_worker_run, u, out_dir): u for u in units}
            rows = []
            for fut in cf.as_completed(futures):
                u = futures[fut]
                try:
                    rows.extend(fut.result())
                except Exception as exc:
                    raise UsageError(f"trial {u.trial} (mode {u.mode}, seed {u.tsp_seed}) failed: {exc}") from exc
    return sorted(rows, key=lambda r: (MODES.index(r["mode"]), r["value"], r["trial"]))


# -- sweeps ----------------------------------------------------------------------------------


def _schedule_length(exp: Experiment, kind: str, mode: str) -> int:
    sect = "pretrain" if kind == "task_specific_pretrain" else "finetune"
    return int(section(exp.cfg, sect, mode)["schedule"]["length"])


def _result(kind: str, exp: Experiment, spec: SweepSpec, rows: list[dict], t0: float) -> dict:
    if len(rows) != spec.expected_runs:
        raise UsageError(f"run accounting mismatch: {len(rows)} runs, expected {spec.expected_runs}")
    return {
        "kind": kind,
        "axis": spec.axis,
        "metric": exp.metric,
        "spec": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(spec).items()},
        "run_count": len(rows),
        "expected_run_count": spec.expected_runs,
        "runs": rows,
        "summaries": [],
        "curves": [],
        "timing": {"wall_seconds": round(time.time() - t0, 3), "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S")},
    }


def _summary_entry(key: str, mode: str, values: Sequence[float], checkpoint: int | None = None) -> dict:
    d = {"key": key, "mode": mode, "checkpoint": checkpoint}
    d.update(DistributionSummary.from_values(values).to_dict())
    return d


def sweep_seeds(exp: Experiment, spec: SweepSpec, workers: int = 1, out_dir=None) -> dict:
    """TSP + fine-tuning per restart and mode; one dev-metric distribution per mode."""
    if spec.axis != "random_seed":
        raise ConfigError("sweep_seeds needs axis=random_seed")
    t0 = time.time()
    units = []
    for mode in spec.modes:
        tsp = spec.pretrain_iterations if spec.pretrain_iterations is not None else _schedule_length(exp, "task_specific_pretrain", mode)
        ft = spec.finetune_epochs or _schedule_length(exp, "finetune", mode)
        for vi, v in enumerate(spec.values):
            for t in range(spec.trials_per_value):
                r = spec.run_seed(vi, t)
                units.append(TrialUnit(mode, vi * spec.trials_per_value + t, r, (tsp,), (r,), (ft,), ((v,),)))
    rows = execute(exp, units, workers, out_dir)
    res = _result("sweep-seeds", exp, spec, rows, t0)
    for mode in spec.modes:
        vals = [r["metrics"][exp.metric] for r in rows if r["mode"] == mode]
        res["summaries"].append(_summary_entry(mode, mode, vals))
    return res


def _checkpoint_units(spec: SweepSpec, marks: Sequence[int], ft_for_mode, attack: bool) -> list[TrialUnit]:
    units = []
    for mode in spec.modes:
        ft = ft_for_mode(mode)
        for t in range(spec.trials_per_value):
            seeds = tuple(spec.run_seed(i, t) for i in range(len(marks)))
            if spec.is_product:
                values = tuple((m, e) for m in marks for e in ft)
            else:
                values = tuple((m,) for m in marks)
            units.append(TrialUnit(mode, t, spec.seed_base + t, tuple(marks), seeds, tuple(ft), values, attack))
    return units


def sweep_pretrain_iters(exp: Experiment, spec: SweepSpec, workers: int = 1, out_dir=None) -> dict:
    """Fine-tune (fixed epochs) from each pretraining checkpoint; metric per checkpoint."""
    if spec.axis != "pretrain_iterations":
        raise ConfigError("sweep_pretrain_iters needs axis=pretrain_iterations")
    t0 = time.time()
    units = _checkpoint_units(spec, spec.values,
                              lambda m: (spec.finetune_epochs or _schedule_length(exp, "finetune", m),), False)
    rows = execute(exp, units, workers, out_dir)
    res = _result("sweep-pretrain", exp, spec, rows, t0)
    res["x_unit"] = "pretrain_iterations"
    for mode in spec.modes:
        mine = [r for r in rows if r["mode"] == mode]
        for v in spec.values:
            ys = [r["metrics"][exp.metric] for r in mine if r["pretrain_iterations"] == v]
            res["curves"].append({"x": v, "y": float(np.mean(ys)), "mode": mode})
        res["summaries"].append(_summary_entry(mode, mode, [r["metrics"][exp.metric] for r in mine]))
    return res


def sweep_finetune_epochs(exp: Experiment, spec: SweepSpec, workers: int = 1, out_dir=None) -> dict:
    """Distribution of the dev metric over fine-tuning epoch budgets, per checkpoint and mode.

    By default each checkpoint is fine-tuned once and evaluated after every
    budget in the grid; with constant learning rate and per-epoch seeded
    shuffling this equals separate runs of each length. ``independent_runs``
    gives every (checkpoint, budget) its own seed and run instead.
    """
    if not spec.is_product:
        raise ConfigError("sweep_finetune_epochs needs a finetune_epochs axis with checkpoints")
    t0 = time.time()
    if spec.independent_runs:
        units = []
        for mode in spec.modes:
            for ci, c in enumerate(spec.checkpoints):
                for ei, e in enumerate(spec.values):
                    for t in range(spec.trials_per_value):
                        r = spec.run_seed(ci * len(spec.values) + ei, t)
                        units.append(TrialUnit(mode, t, r, (c,), (r,), (e,), ((c, e),)))
    else:
        units = _checkpoint_units(spec, spec.checkpoints, lambda m: spec.values, False)
    rows = execute(exp, units, workers, out_dir)
    res = _result("sweep-finetune", exp, spec, rows, t0)
    res["x_unit"] = "finetune_epochs"
    for c in spec.checkpoints:
        for mode in spec.modes:
            mine = [r for r in rows if r["mode"] == mode and r["pretrain_iterations"] == c]
            res["summaries"].append(_summary_entry(f"{c}:{mode}", mode, [r["metrics"][exp.metric] for r in mine], c))
            for e in spec.values:
                ys = [r["metrics"][exp.metric] for r in mine if r["finetune_epochs"] == e]
                res["curves"].append({"x": e, "y": float(np.mean(ys)), "mode": mode, "checkpoint": c})
    return res


def attack_curve(exp: Experiment, spec: SweepSpec, workers: int = 1, out_dir=None) -> dict:
    """Attack success rate after fixed fine-tuning from each pretraining checkpoint."""
    if spec.axis != "pretrain_iterations":
        raise ConfigError("attack_curve needs axis=pretrain_iterations")
    if len(exp.lexicon) == 0:
        raise ConfigError("attack_curve needs a non-empty synonym lexicon")
    t0 = time.time()
    units = _checkpoint_units(spec, spec.values,
                              lambda m: (spec.finetune_epochs or _schedule_length(exp, "finetune", m),), True)
    rows = execute(exp, units, workers, out_dir)
    res = _result("attack-curve", exp, spec, rows, t0)
    unit = section(exp.cfg, "pretrain", spec.modes[0])["schedule"].get("unit", "iterations")
    res["x_unit"] = f"pretrain_{unit}"
    for mode in spec.modes:
        mine = [r for r in rows if r["mode"] == mode]
        for v in spec.values:
            ys = [r["attack"]["rate"] for r in mine if r["pretrain_iterations"] == v]
            res["curves"].append({"x": v, "y": float(np.mean(ys)), "mode": mode})
        res["summaries"].append(_summary_entry(mode, mode, [r["attack"]["rate"] for r in mine]))
    return res


SWEEPS = {
    "sweep-seeds": ("random_seed", sweep_seeds),
    "sweep-pretrain": ("pretrain_iterations", sweep_pretrain_iters),
    "sweep-finetune": ("finetune_epochs", sweep_finetune_epochs),
    "attack": ("attack", attack_curve),
}


def sweep_spec_from_config(cfg: dict, name: str) -> SweepSpec:
    d = dict(section(cfg, "sweeps", name))
    d.setdefault("axis", name if name in AXES else "pretrain_iterations")
    return SweepSpec.from_dict(d)


# -- reports ---------------------------------------------------------------------------------


def report_schema() -> dict:
    text = resources.files("adapterlab.schemas").joinpath(REPORT_SCHEMA).read_text(encoding="utf-8")
    return json.loads(text)


def validate_report(result: dict) -> None:
    import jsonschema

    from .errors import SchemaError

    try:
        jsonschema.validate(result, report_schema())
    except jsonschema.ValidationError as exc:
        raise SchemaError(f"report does not match schema: {exc.message}") from None


SUMMARY_COLUMNS = ["key", "mode", "checkpoint"] + list(DistributionSummary.__dataclass_fields__)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return " ".join(repr(float(x)) for x in v)
    return str(v)


def summaries_csv(result: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for s in result["summaries"]:
        w.writerow([_fmt(s.get(c)) for c in SUMMARY_COLUMNS])
    return buf.getvalue()


def runs_csv(result: dict) -> str:
    metric_names = sorted({m for r in result["runs"] for m in r["metrics"]})
    cols = ["mode", "trial", "value", "run_seed", "init_seed", "pretrain_iterations", "finetune_epochs"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols + metric_names + ["attack_rate"])
    for r in result["runs"]:
        w.writerow([_fmt(r[c]) if c != "value" else "x".join(str(v) for v in r["value"]) for c in cols]
                   + [_fmt(float(r["metrics"][m])) if m in r["metrics"] else "" for m in metric_names]
                   + [_fmt(r["attack"]["rate"]) if "attack" in r else ""])
    return buf.getvalue()


def curves_csv(result: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "mode", "checkpoint"])
    for c in result["curves"]:
        w.writerow([c["x"], repr(float(c["y"])), c["mode"], _fmt(c.get("checkpoint"))])
    return buf.getvalue()


def read_summaries_csv(path) -> dict[str, DistributionSummary]:
    out = {}
    with Path(path).open(encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            d = {k: row[k] for k in DistributionSummary.__dataclass_fields__}
            out[row["key"]] = DistributionSummary(
                n=int(d["n"]), values=[float(x) for x in d["values"].split()],
                **{k: float(d[k]) for k in ("mean", "std", "sample_std", "min", "q1", "median", "q3", "max")},
            )
    return out


def deterministic_view(result: dict) -> dict:
    return {k: v for k, v in result.items() if k != "timing"}


def emit_report(result: dict, out_dir, formats: Sequence[str] = ("json", "csv"), stem: str = "report") -> list[Path]:
    """Write the report JSON (schema-checked) and/or CSVs; returns the paths written."""
    if not result or not result.get("runs") or not result.get("summaries"):
        raise UsageError("refusing to write a report for empty results")
    unknown = [f for f in formats if f not in ("json", "csv")]
    if unknown:
        raise UsageError(f"unknown report formats {unknown}")
    validate_report(result)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    written = []
    if "json" in formats:
        p = out / f"{stem}.json"
        p.write_text(json.dumps(result, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        written.append(p)
    if "csv" in formats:
        for name, text in (("summaries", summaries_csv(result)), ("runs", runs_csv(result))):
            p = out / f"{stem}-{name}.csv"
            p.write_text(text, encoding="utf-8")
            written.append(p)
        if result["curves"]:
            p = out / f"{stem}-curves.csv"
            p.write_text(curves_csv(result), encoding="utf-8")
            written.append(p)
    return written
