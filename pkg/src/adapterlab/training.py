"""
Objectives, Adam, and the phase runner for task-specific pretraining (MLM on
the task's own text) followed by supervised fine-tuning.

One iteration is one optimizer step on one batch. Every random draw inside a
phase comes from generators seeded by ``(seed, stream)``, so a phase is a
pure function of model state, data, config and seed.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .data import CLS, MASK, N_SPECIAL, PAD, SEP, EncodedBatchSource
from .errors import ConfigError, DataError, TrainingError
from .metrics import GradNormSnapshot, argmax_predictions, compute_metrics, grad_norm_by_group
from .model import Model, matching_groups, set_trainable
from .tensor import Tensor

IGNORE_INDEX = -100
PHASE_KINDS = ("task_specific_pretrain", "finetune")
OBJECTIVES = ("mlm", "classification", "regression")
MODES = ("with_adapter", "without_adapter")
TRAINABLE_PATTERNS = {
    "with_adapter": "*.adapter|classifier|mlm_head",
    "without_adapter": "*",
}
_UNMASKABLE = (PAD, CLS, SEP, MASK)


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_seq_len: int = 128
    epochs: int = 10
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip_norm: float | None = None

    def __post_init__(self):
        if not self.learning_rate >= 0 or self.batch_size < 1:
            raise ConfigError(f"need learning_rate >= 0 and batch_size >= 1 (got {self.learning_rate}, {self.batch_size})")
        object.__setattr__(self, "betas", tuple(self.betas))

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass(frozen=True)
class MaskingPolicy:
    mask_rate: float = 0.15
    mask_token_frac: float = 0.8
    random_token_frac: float = 0.1
    keep_frac: float = 0.1
    seed: int = 0

    def __post_init__(self):
        total = self.mask_token_frac + self.random_token_frac + self.keep_frac
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"masking fractions must sum to 1 (got {total})")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ConfigError(f"mask_rate must be in [0, 1] (got {self.mask_rate})")


@dataclass(frozen=True)
class Schedule:
    """Phase length in ``unit``s; checkpoints are emitted at ``checkpoint_at`` (same unit)."""

    length: int
    unit: str = "iterations"
    checkpoint_at: tuple[int, ...] = ()
    log_every: int = 10

    def __post_init__(self):
        if self.unit not in ("iterations", "epochs"):
            raise ConfigError(f"schedule unit must be 'iterations' or 'epochs' (got {self.unit!r})")
        if self.length < 0 or self.log_every < 1:
            raise ConfigError("schedule length must be >= 0 and log_every >= 1")
        object.__setattr__(self, "checkpoint_at", tuple(sorted(set(int(c) for c in self.checkpoint_at))))


@dataclass(frozen=True)
class TrainPhase:
    kind: str
    objective: str
    schedule: Schedule
    hyperparams: OptimizerConfig
    mode: str = "with_adapter"
    trainable_pattern: str | None = None

    def __post_init__(self):
        if self.kind not in PHASE_KINDS or self.objective not in OBJECTIVES or self.mode not in MODES:
            raise ConfigError(f"bad phase: kind={self.kind!r} objective={self.objective!r} mode={self.mode!r}")
        if self.kind == "task_specific_pretrain" and self.objective != "mlm":
            raise ConfigError("task-specific pretraining must use the mlm objective")
        if self.trainable_pattern is None:
            object.__setattr__(self, "trainable_pattern", TRAINABLE_PATTERNS[self.mode])

    @property
    def tag(self) -> str:
        return "tsp" if self.kind == "task_specific_pretrain" else "ft"


# -- objectives ------------------------------------------------------------------------


def mask_batch(token_ids, policy: MaskingPolicy, vocab_size: int, rng: np.random.Generator | None = None):
    """BERT-style corruption: pick positions at ``mask_rate``, then 80/10/10 mask/random/keep.

    Random replacements are drawn uniformly from the non-special ids. Returns
    ``(corrupted_ids, targets)`` with ``IGNORE_INDEX`` at unselected positions.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    maskable = ~np.isin(ids, _UNMASKABLE)
    if not maskable.any():
        raise DataError("batch has no maskable tokens")
    if rng is None:
        rng = np.random.default_rng(policy.seed)
    selected = (rng.random(ids.shape) < policy.mask_rate) & maskable
    split = rng.random(ids.shape)
    random_ids = rng.integers(N_SPECIAL, vocab_size, size=ids.shape)
    corrupted = ids.copy()
    to_mask = selected & (split < policy.mask_token_frac)
    to_random = selected & (split >= policy.mask_token_frac) & (split < policy.mask_token_frac + policy.random_token_frac)
    corrupted[to_mask] = MASK
    corrupted[to_random] = random_ids[to_random]
    targets = np.where(selected, ids, IGNORE_INDEX)
    return corrupted, targets


def mlm_loss(model: Model, corrupted_ids, targets, attention_mask=None, train: bool = False, rng=None) -> Tensor:
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != np.asarray(corrupted_ids).shape:
        raise DataError(f"targets {targets.shape} do not match inputs {np.asarray(corrupted_ids).shape}")
    hidden = model.forward(corrupted_ids, attention_mask, train=train, rng=rng)["sequence_output"]
    flat = hidden.reshape(-1, model.config.d_model)
    rows = np.nonzero(targets.reshape(-1) != IGNORE_INDEX)[0]
    if rows.size == 0:
        return T.cross_entropy(model.mlm_logits(flat), targets.reshape(-1), IGNORE_INDEX)
    return T.cross_entropy(model.mlm_logits(flat[rows]), targets.reshape(-1)[rows], IGNORE_INDEX)


def classification_loss(model: Model, token_ids, attention_mask, labels, train: bool = False, rng=None) -> Tensor:
    pooled = model.forward(token_ids, attention_mask, train=train, rng=rng)["pooled"]
    return T.cross_entropy(model.classifier_logits(pooled, train, rng), labels)


def regression_loss(model: Model, token_ids, attention_mask, targets, train: bool = False, rng=None) -> Tensor:
    pooled = model.forward(token_ids, attention_mask, train=train, rng=rng)["pooled"]
    out = model.classifier_logits(pooled, train, rng)
    return T.mse_loss(out[:, 0], np.asarray(targets, dtype=np.float64))


# -- optimizer -------------------------------------------------------------------------


def adam_step(param: Tensor, grad: np.ndarray, m: np.ndarray, v: np.ndarray, step: int,
              config: OptimizerConfig, lr: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One bias-corrected Adam update of ``param`` in place; returns the new moments.

    Weight decay is decoupled (applied to the parameter, not the gradient).
    """
    b1, b2 = config.betas
    lr = config.learning_rate if lr is None else lr
    m = b1 * m + (1.0 - b1) * grad
    v = b2 * v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**step)
    v_hat = v / (1.0 - b2**step)
    update = m_hat / (np.sqrt(v_hat) + config.eps)
    if config.weight_decay:
        update = update + config.weight_decay * param.data
    param.data = param.data - lr * update
    return m, v


class Adam:
    def __init__(self, model: Model, config: OptimizerConfig, lr_schedule: Callable[[int], float] | None = None):
        self.model = model
        self.config = config
        self.lr_schedule = lr_schedule or (lambda step: 1.0)
        self.step_count = 0
        self.state: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    @property
    def lr(self) -> float:
        return self.config.learning_rate * self.lr_schedule(self.step_count + 1)

    def step(self) -> None:
        todo = []
        for gname, g in self.model.groups.items():
            if not g.trainable:
                continue
            for name, p in zip(g.names, g.params):
                if p.grad is None:
                    continue
                if not np.isfinite(p.grad).all():
                    raise TrainingError(f"non-finite gradient in group {gname!r} (parameter {name})")
                todo.append((name, p))
        scale = 1.0
        clip = self.config.grad_clip_norm
        if clip is not None:
            total = math.sqrt(sum(float(np.dot(p.grad.ravel(), p.grad.ravel())) for _, p in todo))
            if total > clip:
                scale = clip / (total + 1e-6)
        lr = self.lr
        self.step_count += 1
        for name, p in todo:
            m, v = self.state.get(name) or (np.zeros_like(p.data), np.zeros_like(p.data))
            grad = p.grad if scale == 1.0 else p.grad * scale
            self.state[name] = adam_step(p, grad, m, v, self.step_count, self.config, lr)


# -- phase runner ----------------------------------------------------------------------


@dataclass
class TrainLog:
    phase: str
    losses: list[float] = field(default_factory=list)
    records: list[dict] = field(default_factory=list)
    grad_norms: list[GradNormSnapshot] = field(default_factory=list)
    checkpoints: dict[int, str] = field(default_factory=dict)
    snapshots: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)
    iterations: int = 0
    epochs: int = 0

    def deterministic_records(self) -> list[dict]:
        return [{k: v for k, v in r.items() if k != "wall_ms"} for r in self.records]

    def write_jsonl(self, path) -> None:
        with Path(path).open("a", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")


class Callback:
    """Hooks invoked by :func:`run_phase`; override what you need."""

    def on_log(self, record: dict, snapshot: GradNormSnapshot, model: Model) -> None:
        pass

    def on_epoch_end(self, epoch: int, iteration: int, model: Model) -> None:
        pass

    def on_checkpoint(self, mark: int, model: Model) -> None:
        pass


def _check_phase(model: Model, phase: TrainPhase) -> None:
    if phase.mode == "with_adapter":
        if model.config.adapter is None:
            raise ConfigError("with_adapter phase on a model built without adapters")
        backbone = set(model.backbone_groups()) & set(matching_groups(model, phase.trainable_pattern))
        if backbone:
            raise ConfigError(f"with_adapter phase would train backbone groups {sorted(backbone)}")
    elif model.config.adapter is not None:
        raise ConfigError("without_adapter phase expects a model built with adapter=None")


def phase_iterations(phase: TrainPhase, n_examples: int) -> int:
    per_epoch = math.ceil(n_examples / phase.hyperparams.batch_size)
    s = phase.schedule
    return s.length if s.unit == "iterations" else s.length * per_epoch


def run_phase(
    model: Model,
    phase: TrainPhase,
    data: EncodedBatchSource,
    seed: int = 0,
    callbacks: Sequence[Callback] = (),
    masking: MaskingPolicy | None = None,
    run_id: str = "run",
    out_dir=None,
    keep_snapshots: bool = False,
    track_frozen_grads: bool = False,
) -> TrainLog:
    """Train ``model`` in place for one phase and return its log.

    Checkpoints at ``phase.schedule.checkpoint_at`` are written to
    ``out_dir/<run_id>-<phase>-<mark>.ckpt`` when ``out_dir`` is given, and kept
    in memory (``log.snapshots``) when ``keep_snapshots`` is set. Mark 0 is the
    state before the first step.
    """
    _check_phase(model, phase)
    if phase.objective != "mlm" and data.labels is None:
        raise DataError(f"{phase.objective} phase needs labelled data")
    if len(data) == 0:
        raise DataError("empty training data")
    masking = masking or MaskingPolicy(seed=seed)
    set_trainable(model, phase.trainable_pattern, track_frozen_grads)
    opt = Adam(model, phase.hyperparams)
    order_rng = np.random.default_rng([seed, 11])
    dropout_rng = np.random.default_rng([seed, 12])
    mask_rng = np.random.default_rng([seed, 13])
    sched = phase.schedule
    total = phase_iterations(phase, len(data))
    marks = set(sched.checkpoint_at)
    log = TrainLog(phase.tag)

    def checkpoint(mark: int) -> None:
        if keep_snapshots:
            log.snapshots[mark] = model.state_dict()
        if out_dir is not None:
            suffix = str(mark) if sched.unit == "iterations" else f"epoch{mark}"
            path = save_checkpoint(model, Path(out_dir) / f"{run_id}-{phase.tag}-{suffix}.ckpt")
            log.checkpoints[mark] = str(path)
        for cb in callbacks:
            cb.on_checkpoint(mark, model)

    if 0 in marks:
        checkpoint(0)
    bs = phase.hyperparams.batch_size
    iteration = epoch = 0
    t0 = time.perf_counter()
    while iteration < total:
        perm = order_rng.permutation(len(data))
        finished_epoch = True
        for start in range(0, len(data), bs):
            batch = data.subset(perm[start:start + bs])
            model.zero_grad()
            if phase.objective == "mlm":
                corrupted, targets = mask_batch(batch.token_ids, masking, model.config.vocab_size, mask_rng)
                loss = mlm_loss(model, corrupted, targets, batch.attention_mask, True, dropout_rng)
            elif phase.objective == "classification":
                loss = classification_loss(model, batch.token_ids, batch.attention_mask, batch.labels, True, dropout_rng)
            else:
                loss = regression_loss(model, batch.token_ids, batch.attention_mask, batch.labels, True, dropout_rng)
            loss.backward()
            lr = opt.lr
            iteration += 1
            value = loss.item()
            log.losses.append(value)
            if iteration % sched.log_every == 0:
                snap = grad_norm_by_group(model, iteration)
                record = {"phase": phase.tag, "iteration": iteration, "loss": value, "lr": lr,
                          "grad_norms": snap.norms, "wall_ms": round((time.perf_counter() - t0) * 1e3, 3)}
                log.grad_norms.append(snap)
                log.records.append(record)
                for cb in callbacks:
                    cb.on_log(record, snap, model)
            opt.step()
            if sched.unit == "iterations" and iteration in marks:
                checkpoint(iteration)
            if iteration >= total:
                finished_epoch = start + bs >= len(data)
                break
        if finished_epoch:
            epoch += 1
            if sched.unit == "epochs" and epoch in marks:
                checkpoint(epoch)
            for cb in callbacks:
                cb.on_epoch_end(epoch, iteration, model)
    log.iterations, log.epochs = iteration, epoch
    return log


# -- evaluation ------------------------------------------------------------------------


def predict_logits(model: Model, data: EncodedBatchSource, batch_size: int = 128) -> np.ndarray:
    out = [model.logits(data.token_ids[i:i + batch_size], data.attention_mask[i:i + batch_size])
           for i in range(0, len(data), batch_size)]
    return np.concatenate(out, axis=0)


def predictions(model: Model, data: EncodedBatchSource, regression: bool = False) -> np.ndarray:
    logits = predict_logits(model, data)
    return logits[:, 0] if regression else argmax_predictions(logits)


def default_metrics(task_kind: str) -> tuple[str, ...]:
    return ("pearson", "spearman") if task_kind == "regression" else ("accuracy", "f1", "mcc")


def evaluate(model: Model, data: EncodedBatchSource, metric_set: Sequence[str] = ("accuracy",),
             regression: bool = False) -> dict[str, float]:
    """Dropout-free evaluation; returns metric name -> value."""
    if len(data) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    preds = predictions(model, data, regression)
    return compute_metrics(preds, data.labels, metric_set).metrics


def phase_from_dict(kind: str, mode: str, d: dict, objective: str | None = None) -> TrainPhase:
    """Phase from a config section: ``{"schedule": {...}, "optimizer": {...}}``."""
    sched = dict(d.get("schedule", {}))
    if "checkpoint_at" in sched:
        sched["checkpoint_at"] = tuple(sched["checkpoint_at"])
    objective = objective or ("mlm" if kind == "task_specific_pretrain" else "classification")
    return TrainPhase(kind, objective, Schedule(**sched), OptimizerConfig.from_dict(d.get("optimizer", {})),
                      mode, d.get("trainable_pattern"))


def phase_to_dict(phase: TrainPhase) -> dict:
    return {"kind": phase.kind, "objective": phase.objective, "mode": phase.mode,
            "trainable_pattern": phase.trainable_pattern, "schedule": asdict(phase.schedule),
            "optimizer": asdict(phase.hyperparams)}
