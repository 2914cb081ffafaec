"""Weight penalties: l1, l2, and group lasso with selectable grouping.

Each penalty maps one tracked weight tensor to a scalar penalty tensor wired
into the tape via a closed-form (sub)gradient, so penalties compose with any
loss through the usual backward sweep.  Subgradient conventions: sign(0) = 0
for l1, and a group whose norm is exactly zero contributes zero gradient,
which is what lets groups that reach zero stay there.

During transfer training these penalties are applied to the gate-unit
weights only, never to the backbone networks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

GROUPINGS = ("filter_wise", "channel_wise", "both")


@dataclass(frozen=True)
class PenaltyConfig:
    """Penalty strengths; zero disables a term.

    ``grouping`` chooses which slices of each weight array form the lasso
    groups: leading-axis slices (one group per output filter/unit),
    second-axis slices (one group per input channel), or the sum of both
    penalties.  Config keys: reg.l1, reg.l2, reg.group, reg.grouping.
    """

    l1: float = 0.0
    l2: float = 0.0
    group: float = 0.0
    grouping: str = "filter_wise"

    def __post_init__(self):
        for name in ("l1", "l2", "group"):
            v = getattr(self, name)
            if v < 0:
                raise ConfigError(f"reg.{name} must be non-negative, got {v}")
        if self.grouping not in GROUPINGS:
            raise ConfigError(f"reg.grouping must be one of {GROUPINGS}, got {self.grouping!r}")

    @property
    def active(self) -> bool:
        return self.l1 > 0 or self.l2 > 0 or self.group > 0


def l1_penalty(t: Tensor) -> Tensor:
    """Sum of absolute values."""
    val = np.abs(t.data).sum(dtype=np.float64).astype(t.data.dtype).reshape(1)

    def grad(g, W=t.data):
        return (g.reshape(()) * np.sign(W),)

    return T.lift([t], val, grad, op="l1")


def l2_penalty(t: Tensor) -> Tensor:
    """Sum of squares (no 1/2 factor), so the gradient is 2w."""
    val = (t.data.astype(np.float64) ** 2).sum().astype(t.data.dtype).reshape(1)

    def grad(g, W=t.data):
        return (g.reshape(()) * 2.0 * W,)

    return T.lift([t], val, grad, op="l2")


def _group_slices(shape: tuple[int, ...], axis: int):
    """Index tuples selecting each group slice along ``axis``."""
    for i in range(shape[axis]):
        yield (slice(None),) * axis + (i,)


def _single_axis_group(t: Tensor, axis: int) -> Tensor:
    W = t.data
    norms = np.sqrt((W.astype(np.float64) ** 2).sum(
        axis=tuple(i for i in range(W.ndim) if i != axis)))
    val = norms.sum().astype(W.dtype).reshape(1)

    def grad(g, W=W, norms=norms):
        out = np.zeros_like(W)
        s = float(g.reshape(()))
        for i, sel in enumerate(_group_slices(W.shape, axis)):
            n = norms[i]
            if n > 0:
                out[sel] = (s / n) * W[sel]
        return (out,)

    return T.lift([t], val, grad, op=f"group_lasso[{axis}]")


def group_lasso_penalty(t: Tensor, grouping: str = "filter_wise") -> Tensor:
    """Sum of euclidean norms of weight groups.

    filter_wise groups are leading-axis slices, channel_wise groups are
    second-axis slices, and ``both`` adds the two penalties.  Requires rank
    at least 2 so that both axes exist.
    """
    if grouping not in GROUPINGS:
        raise ConfigError(f"grouping must be one of {GROUPINGS}, got {grouping!r}")
    if t.data.ndim < 2:
        raise ConfigError(f"group lasso needs rank >= 2, got shape {t.shape}")
    if grouping == "filter_wise":
        return _single_axis_group(t, 0)
    if grouping == "channel_wise":
        return _single_axis_group(t, 1)
    return T.add(_single_axis_group(t, 0), _single_axis_group(t, 1))


def total_regularized_loss(data_loss: Tensor, ptu_weights: list[Tensor],
                           cfg: PenaltyConfig) -> Tensor:
    """data_loss + l1*Sum|w| + l2*Sum w^2 + group*grouplasso(w) over unit weights.

    ``ptu_weights`` are the (usually tracked) gate-unit weight tensors.  Zero
    coefficients skip their term entirely, so with everything off the data
    loss is returned unchanged.
    """
    out = data_loss
    for coeff, fn in ((cfg.l1, l1_penalty), (cfg.l2, l2_penalty)):
        if coeff > 0:
            for w in ptu_weights:
                out = T.add(out, T.scale(fn(w), coeff))
    if cfg.group > 0:
        for w in ptu_weights:
            out = T.add(out, T.scale(group_lasso_penalty(w, cfg.grouping), cfg.group))
    return out


def group_norms(w: np.ndarray, grouping: str = "filter_wise") -> np.ndarray:
    """Euclidean norm of each group, for sparsity reporting."""
    if isinstance(w, T.Tensor):
        w = w.data
    if grouping == "filter_wise":
        axes = tuple(i for i in range(w.ndim) if i != 0)
        return np.sqrt((w.astype(np.float64) ** 2).sum(axis=axes))
    if grouping == "channel_wise":
        axes = tuple(i for i in range(w.ndim) if i != 1)
        return np.sqrt((w.astype(np.float64) ** 2).sum(axis=axes))
    if grouping == "both":
        return np.concatenate([group_norms(w, "filter_wise"), group_norms(w, "channel_wise")])
    raise ConfigError(f"grouping must be one of {GROUPINGS}, got {grouping!r}")


def count_active_groups(w: np.ndarray, grouping: str = "filter_wise",
                        tol: float = 1e-3) -> int:
    """Number of groups whose norm exceeds ``tol``."""
    return int((group_norms(w, grouping) > tol).sum())
