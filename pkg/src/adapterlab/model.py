"""
Micro transformer encoder with optional residual bottleneck adapters.

Each block is post-LN (BERT layout). With an adapter configured, the output
of each sublayer passes through ``h + up(act(down(h)))`` before the residual
connection and layer norm, once after self-attention and once after the
feed-forward sublayer. ``up`` starts at exactly zero so a fresh adapter model
computes the same function as its adapter-free twin.

Parameters are initialised from independent random streams keyed by
``(seed, parameter name)``; adding adapters never perturbs backbone values.
"""

from __future__ import annotations

import fnmatch
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

PAD_ID = 0
HEAD_GROUPS = ("classifier", "mlm_head")


@dataclass(frozen=True)
class AdapterConfig:
    bottleneck_dim: int = 8
    nonlinearity: str = "gelu"
    placement: str = "after_attention_and_ffn"
    init_std: float = 0.02


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    max_seq_len: int = 32
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 64
    dropout_rate: float = 0.1
    adapter: AdapterConfig | None = None
    num_labels: int = 2
    init_std: float = 0.02
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems))

    def violations(self) -> list[str]:
        out = []
        for key in ("vocab_size", "max_seq_len", "d_model", "n_layers", "n_heads", "d_ff", "num_labels"):
            v = getattr(self, key)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v <= 0:
                out.append(f"{key} must be a positive int (got {v!r})")
        ints_ok = not any(k in o for o in out for k in ("d_model", "n_heads"))
        if ints_ok and self.d_model % self.n_heads:
            out.append(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if not 0.0 <= self.dropout_rate < 1.0:
            out.append(f"dropout_rate must lie in [0, 1) (got {self.dropout_rate})")
        if self.adapter is not None:
            a = self.adapter
            if not isinstance(a.bottleneck_dim, int) or a.bottleneck_dim <= 0:
                out.append(f"adapter.bottleneck_dim must be a positive int (got {a.bottleneck_dim!r})")
            elif isinstance(self.d_model, int) and a.bottleneck_dim >= self.d_model:
                out.append(f"adapter.bottleneck_dim ({a.bottleneck_dim}) must be < d_model ({self.d_model})")
            if a.nonlinearity not in T.ACTIVATIONS:
                out.append(f"adapter.nonlinearity must be one of {sorted(T.ACTIVATIONS)} (got {a.nonlinearity!r})")
            if a.placement != "after_attention_and_ffn":
                out.append(f"adapter.placement {a.placement!r} unsupported")
        return out

    @property
    def with_adapter(self) -> bool:
        return self.adapter is not None

    def without_adapter(self) -> "ModelConfig":
        return replace(self, adapter=None)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        adapter = d.pop("adapter", None)
        if isinstance(adapter, dict):
            adapter = AdapterConfig(**adapter)
        return cls(adapter=adapter, **d)


@dataclass
class ParamGroup:
    name: str
    names: list[str] = field(default_factory=list)
    params: list[Tensor] = field(default_factory=list)
    trainable: bool = True

    @property
    def size(self) -> int:
        return sum(p.size for p in self.params)


@dataclass
class AdapterLayer:
    down_weight: Tensor
    down_bias: Tensor
    up_weight: Tensor
    up_bias: Tensor
    nonlinearity: str = "gelu"

    @property
    def d_model(self) -> int:
        return self.down_weight.shape[0]


def apply_adapter(h: Tensor, adapter: AdapterLayer) -> Tensor:
    """Return ``h + up(act(down(h)))``; the output has the shape of ``h``."""
    if h.shape[-1] != adapter.d_model:
        raise DimensionError(f"apply_adapter: input last dim {h.shape[-1]} != adapter d_model {adapter.d_model}")
    z = T.activation(T.linear(h, adapter.down_weight, adapter.down_bias), adapter.nonlinearity)
    return h + T.linear(z, adapter.up_weight, adapter.up_bias)


def _stream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])


def _truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def group_of(param_name: str) -> str:
    parts = param_name.split(".")
    return ".".join(parts[:2]) if parts[0].startswith("block_") else parts[0]


def _specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init kind) for every parameter, in canonical order."""
    d, f = cfg.d_model, cfg.d_ff
    specs = [
        ("embeddings.token", (cfg.vocab_size, d), "normal"),
        ("embeddings.position", (cfg.max_seq_len, d), "normal"),
        ("embeddings.norm.gain", (d,), "ones"),
        ("embeddings.norm.bias", (d,), "zeros"),
    ]
    for i in range(cfg.n_layers):
        b = f"block_{i}"
        for proj in ("query", "key", "value", "output"):
            specs.append((f"{b}.attention.{proj}.weight", (d, d), "normal"))
            specs.append((f"{b}.attention.{proj}.bias", (d,), "zeros"))
        specs += [
            (f"{b}.attention.norm.gain", (d,), "ones"),
            (f"{b}.attention.norm.bias", (d,), "zeros"),
            (f"{b}.ffn.in.weight", (d, f), "normal"),
            (f"{b}.ffn.in.bias", (f,), "zeros"),
            (f"{b}.ffn.out.weight", (f, d), "normal"),
            (f"{b}.ffn.out.bias", (d,), "zeros"),
            (f"{b}.ffn.norm.gain", (d,), "ones"),
            (f"{b}.ffn.norm.bias", (d,), "zeros"),
        ]
        if cfg.adapter is not None:
            k = cfg.adapter.bottleneck_dim
            for site in ("attention", "ffn"):
                specs += [
                    (f"{b}.adapter.{site}.down.weight", (d, k), "adapter_normal"),
                    (f"{b}.adapter.{site}.down.bias", (k,), "zeros"),
                    (f"{b}.adapter.{site}.up.weight", (k, d), "zeros"),
                    (f"{b}.adapter.{site}.up.bias", (d,), "zeros"),
                ]
    specs += [
        ("pooler.weight", (d, d), "normal"),
        ("pooler.bias", (d,), "zeros"),
        ("classifier.weight", (d, cfg.num_labels), "normal"),
        ("classifier.bias", (cfg.num_labels,), "zeros"),
        ("mlm_head.bias", (cfg.vocab_size,), "zeros"),
    ]
    return specs


def _init_value(cfg: ModelConfig, name: str, shape, kind: str, seed: int) -> np.ndarray:
    if kind == "zeros":
        return np.zeros(shape)
    if kind == "ones":
        return np.ones(shape)
    std = cfg.adapter.init_std if kind == "adapter_normal" else cfg.init_std
    return _truncated_normal(_stream(seed, name), shape, std)


class Model:
    """Encoder parameters plus the pooler and both task heads."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self._init_kinds = {n: k for n, _, k in _specs(config)}
        self.groups: dict[str, ParamGroup] = {}
        for name, p in params.items():
            p.name = name
            g = self.groups.setdefault(group_of(name), ParamGroup(group_of(name)))
            g.names.append(name)
            g.params.append(p)
            p.requires_grad = True

    # -- bookkeeping ----------------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_params(self, groups: Iterable[str] | None = None) -> int:
        keep = None if groups is None else set(groups)
        return sum(g.size for n, g in self.groups.items() if keep is None or n in keep)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        missing = [n for n in self.params if n not in state]
        unknown = [n for n in state if n not in self.params]
        if strict and (missing or unknown):
            raise ConfigError(f"state mismatch: missing {missing[:5]}, unexpected {unknown[:5]}")
        for n, arr in state.items():
            if n not in self.params:
                continue
            if self.params[n].shape != tuple(arr.shape):
                raise DimensionError(f"{n}: stored shape {tuple(arr.shape)} != model shape {self.params[n].shape}")
            self.params[n].data = np.array(arr, dtype=np.float64)

    def adapter_groups(self) -> list[str]:
        return [n for n in self.groups if n.endswith(".adapter")]

    def backbone_groups(self) -> list[str]:
        return [n for n in self.groups if not n.endswith(".adapter") and n not in HEAD_GROUPS]

    def reinit(self, pattern: str, seed: int) -> list[str]:
        """Redraw every parameter whose group matches ``pattern`` from ``seed``."""
        touched = []
        for gname in matching_groups(self, pattern):
            for name, p in zip(self.groups[gname].names, self.groups[gname].params):
                p.data = _init_value(self.config, name, p.shape, self._init_kinds[name], seed)
                p.grad = None
            touched.append(gname)
        return touched

    def clone(self) -> "Model":
        twin = Model(self.config, {n: Tensor(p.data) for n, p in self.params.items()})
        for n, g in self.groups.items():
            twin.groups[n].trainable = g.trainable
        for n, p in self.params.items():
            twin.params[n].requires_grad = p.requires_grad
        return twin

    def adapter(self, block: int, site: str) -> AdapterLayer:
        p = self.params
        pre = f"block_{block}.adapter.{site}"
        return AdapterLayer(
            p[f"{pre}.down.weight"], p[f"{pre}.down.bias"], p[f"{pre}.up.weight"], p[f"{pre}.up.bias"],
            self.config.adapter.nonlinearity,
        )

    # -- computation ----------------------------------------------------------

    def forward(self, token_ids, attention_mask=None, train: bool = False, rng: np.random.Generator | None = None):
        cfg, p = self.config, self.params
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 2:
            raise DimensionError(f"token_ids must be [batch, seq], got shape {ids.shape}")
        batch, seq = ids.shape
        if seq > cfg.max_seq_len:
            raise DimensionError(f"sequence length {seq} exceeds max_seq_len {cfg.max_seq_len}")
        mask = (ids != PAD_ID) if attention_mask is None else np.asarray(attention_mask)
        if mask.shape != ids.shape:
            raise DimensionError(f"attention_mask {mask.shape} does not match token_ids {ids.shape}")
        rate = cfg.dropout_rate

        x = T.embedding(p["embeddings.token"], ids) + p["embeddings.position"][:seq]
        x = T.layer_norm(x, p["embeddings.norm.gain"], p["embeddings.norm.bias"], cfg.layer_norm_eps)
        x = T.dropout(x, rate, rng, train)

        # [batch, 1, 1, seq]: True where the key is padding
        key_pad = (mask == 0)[:, None, None, :]
        h, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        scale = 1.0 / math.sqrt(dh)

        def heads(t: Tensor) -> Tensor:
            return t.reshape(batch, seq, h, dh).transpose(0, 2, 1, 3)

        for i in range(cfg.n_layers):
            b = f"block_{i}.attention"
            q = heads(T.linear(x, p[f"{b}.query.weight"], p[f"{b}.query.bias"]))
            k = heads(T.linear(x, p[f"{b}.key.weight"], p[f"{b}.key.bias"]))
            v = heads(T.linear(x, p[f"{b}.value.weight"], p[f"{b}.value.bias"]))
            scores = T.masked_fill((q @ k.transpose(0, 1, 3, 2)) * scale, key_pad, -np.inf)
            attn = T.dropout(T.softmax(scores, axis=-1), rate, rng, train)
            ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(batch, seq, cfg.d_model)
            a = T.dropout(T.linear(ctx, p[f"{b}.output.weight"], p[f"{b}.output.bias"]), rate, rng, train)
            if cfg.adapter is not None:
                a = apply_adapter(a, self.adapter(i, "attention"))
            x = T.layer_norm(x + a, p[f"{b}.norm.gain"], p[f"{b}.norm.bias"], cfg.layer_norm_eps)

            b = f"block_{i}.ffn"
            f = T.gelu(T.linear(x, p[f"{b}.in.weight"], p[f"{b}.in.bias"]))
            f = T.dropout(T.linear(f, p[f"{b}.out.weight"], p[f"{b}.out.bias"]), rate, rng, train)
            if cfg.adapter is not None:
                f = apply_adapter(f, self.adapter(i, "ffn"))
            x = T.layer_norm(x + f, p[f"{b}.norm.gain"], p[f"{b}.norm.bias"], cfg.layer_norm_eps)

        pooled = T.tanh(_rowwise_linear(x[:, 0, :], p["pooler.weight"], p["pooler.bias"]))
        return {"sequence_output": x, "pooled": pooled}

    def mlm_logits(self, hidden: Tensor) -> Tensor:
        """Vocabulary logits through the token embedding (tied) plus a bias."""
        return hidden @ T.transpose(self.params["embeddings.token"]) + self.params["mlm_head.bias"]

    def classifier_logits(self, pooled: Tensor, train: bool = False, rng: np.random.Generator | None = None):
        pooled = T.dropout(pooled, self.config.dropout_rate, rng, train)
        return _rowwise_linear(pooled, self.params["classifier.weight"], self.params["classifier.bias"])

    def logits(self, token_ids, attention_mask=None) -> np.ndarray:
        with T.no_grad():
            out = self.forward(token_ids, attention_mask)
            return self.classifier_logits(out["pooled"]).data


def build_model(config: ModelConfig, seed: int) -> Model:
    params = {
        name: Tensor(_init_value(config, name, shape, kind, seed))
        for name, shape, kind in _specs(config)
    }
    return Model(config, params)


def _rowwise_linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    # a [batch, 1, d] stack is multiplied one row at a time, so each output row
    # is bitwise independent of which other rows share the batch
    batch = x.shape[0]
    out = T.linear(x.reshape(batch, 1, x.shape[1]), weight, bias)
    return out.reshape(batch, out.shape[-1])


def forward(model: Model, token_ids, attention_mask=None, train: bool = False, rng=None) -> dict:
    return model.forward(token_ids, attention_mask, train=train, rng=rng)


def matching_groups(model: Model, pattern: str) -> list[str]:
    pats = [s.strip() for s in pattern.split("|") if s.strip()]
    return [n for n in model.groups if any(fnmatch.fnmatchcase(n, pat) for pat in pats)]


def set_trainable(model: Model, pattern: str, track_frozen_grads: bool = False) -> int:
    """Mark groups matching ``pattern`` (``|``-separated globs) trainable, freeze the rest.

    Returns the number of trainable scalars. With ``track_frozen_grads`` the
    frozen groups still receive gradients (for telemetry) but the optimizer
    leaves them alone.
    """
    hits = set(matching_groups(model, pattern))
    for name, g in model.groups.items():
        g.trainable = name in hits
        for p in g.params:
            p.requires_grad = g.trainable or track_frozen_grads
            p.grad = None
    return sum(model.groups[n].size for n in hits)


def trainable_param_count(model: Model) -> int:
    return sum(g.size for g in model.groups.values() if g.trainable)


def adapter_param_fraction(model: Model) -> float:
    """Adapter scalars over all scalars outside the task heads (adapters included)."""
    adapters = model.num_params(model.adapter_groups())
    total = model.num_params([n for n in model.groups if n not in HEAD_GROUPS])
    return adapters / total if total else 0.0
