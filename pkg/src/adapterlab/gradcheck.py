"""Central finite-difference checks against reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad

STEP = 1e-5
REL_TOL = 1e-4
ABS_TOL = 1e-8
ANALYTIC_FLOOR = 1e-8


@dataclass
class CoordinateCheck:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float

    @property
    def ok(self) -> bool:
        if abs(self.analytic) > ANALYTIC_FLOOR:
            return abs(self.analytic - self.numeric) / abs(self.analytic) < REL_TOL
        return abs(self.analytic - self.numeric) < ABS_TOL


def numeric_derivative(fn: Callable[[], float], t: Tensor, index: tuple[int, ...], step: float = STEP) -> float:
    orig = t.data[index]
    t.data[index] = orig + step
    hi = fn()
    t.data[index] = orig - step
    lo = fn()
    t.data[index] = orig
    return (hi - lo) / (2.0 * step)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: dict[str, Tensor] | Sequence[Tensor],
    n_points: int = 20,
    seed: int = 0,
    step: float = STEP,
) -> list[CoordinateCheck]:
    """Compare ``backward`` against central differences at random coordinates.

    ``loss_fn`` must rebuild the graph on every call and be deterministic.
    Up to ``n_points`` coordinates are drawn per tensor (all of them if the
    tensor is smaller).
    """
    if not isinstance(tensors, dict):
        tensors = {t.name or f"t{i}": t for i, t in enumerate(tensors)}
    for t in tensors.values():
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}

    def scalar() -> float:
        with no_grad():
            return loss_fn().item()

    rng = np.random.default_rng(seed)
    results = []
    for name, t in tensors.items():
        flat = rng.choice(t.size, size=min(n_points, t.size), replace=False)
        for f in sorted(flat.tolist()):
            idx = np.unravel_index(f, t.shape)
            results.append(
                CoordinateCheck(name, tuple(int(i) for i in idx), float(analytic[name][idx]),
                                numeric_derivative(scalar, t, idx, step))
            )
    return results


def check_group_gradients(loss_fn: Callable[[], Tensor], groups: dict[str, Sequence[tuple[str, Tensor]]],
                          n_points: int = 20, seed: int = 0, step: float = STEP) -> list[CoordinateCheck]:
    """Like :func:`check_gradients`, but ``n_points`` coordinates per group of tensors.

    Coordinates are drawn uniformly over the group's concatenated scalars.
    """
    members = [t for named in groups.values() for _, t in named]
    for t in members:
        t.grad = None
    loss_fn().backward()
    analytic = {id(t): (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for t in members}

    def scalar() -> float:
        with no_grad():
            return loss_fn().item()

    rng = np.random.default_rng(seed)
    results = []
    for gname, named in groups.items():
        sizes = np.array([t.size for _, t in named])
        bounds = np.cumsum(sizes)
        flat = rng.choice(int(bounds[-1]), size=min(n_points, int(bounds[-1])), replace=False)
        for f in sorted(flat.tolist()):
            k = int(np.searchsorted(bounds, f, side="right"))
            name, t = named[k]
            idx = np.unravel_index(f - (int(bounds[k - 1]) if k else 0), t.shape)
            idx = tuple(int(i) for i in idx)
            results.append(CoordinateCheck(name, idx, float(analytic[id(t)][idx]),
                                           numeric_derivative(scalar, t, idx, step)))
    return results
