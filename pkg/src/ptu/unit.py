"""The gated transfer unit that blends source and target activations.

A unit sits at one junction between two networks.  Given the source branch
activation ``h_s`` and the target branch activation ``h_t`` (same width), it
computes two sigmoid gates from their concatenation and emits a convex
per-coordinate blend:

    r = sigmoid([h_s, h_t] @ w_r)
    z = sigmoid([h_s, h_t] @ w_z)
    adapted  = (1 - r) * h_s + r * act(h_s @ w_h)
    combined = (1 - z) * h_t + z * adapted

z picks between the target's own activation and the transferred one; r picks,
inside the transferred path, between the raw source activation and a learned
remap of it.  Driving the gates to their saturation corners recovers plain
target training, verbatim source reuse, and remap-only behaviour, so the unit
subsumes the three discrete per-layer transfer states.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .tensor import Tensor

# The remap nonlinearity matches the host network family; gates are sigmoid.
PHI_KINDS = ("tanh", "relu")

GATE_HIST_BINS = 10


@dataclass
class PtuParams:
    """Weights of one unit over activations of width ``dim``.

    ``w_r`` and ``w_z`` map the concatenated pair (width ``2*dim``) to gate
    logits; ``w_h`` remaps the source activation.  No bias terms.
    """

    w_r: np.ndarray
    w_z: np.ndarray
    w_h: np.ndarray
    phi: str = "tanh"

    def __post_init__(self):
        if self.phi not in PHI_KINDS:
            raise ConfigError(f"phi must be one of {PHI_KINDS}, got {self.phi!r}")
        if self.w_h.ndim != 2 or self.w_h.shape[0] != self.w_h.shape[1]:
            raise ConfigError(f"w_h must be square, got {self.w_h.shape}")
        d = self.dim
        if self.w_r.shape != (2 * d, d):
            raise ConfigError(f"w_r must be (2*{d}, {d}), got {self.w_r.shape}")
        if self.w_z.shape != (2 * d, d):
            raise ConfigError(f"w_z must be (2*{d}, {d}), got {self.w_z.shape}")

    @property
    def dim(self) -> int:
        return self.w_h.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"w_r": self.w_r, "w_z": self.w_z, "w_h": self.w_h}


@dataclass
class PtuOutput:
    """One junction's forward result plus the gate values that produced it.

    ``adapted`` is the intermediate source-path blend, kept for inspection.
    ``layer_index`` identifies the junction (for a recurrent assembly, the
    time step).
    """

    combined: Tensor
    r_gate: Tensor
    z_gate: Tensor
    adapted: Tensor
    layer_index: int | None = None


@dataclass
class GateStats:
    """Summary of gate behaviour at one junction over a batch of outputs.

    Histograms are raw element counts over 10 equal bins spanning [0, 1].
    """

    layer_index: int
    mean_r: float
    mean_z: float
    histogram_r: list[int] = field(default_factory=list)
    histogram_z: list[int] = field(default_factory=list)


def ptu_init(dim: int, phi: str = "tanh", rng_seed: int = 0, scale: float = 0.1) -> PtuParams:
    """Fresh unit weights, uniform in [-scale, scale].

    The small symmetric range keeps both gates near 0.5 at the start, so
    neither branch is pre-committed before training.  scale=0 is allowed and
    pins both gates to exactly 0.5 on any input.
    """
    if dim < 1:
        raise ConfigError(f"unit width must be >= 1, got {dim}")
    if scale < 0:
        raise ConfigError(f"init scale must be non-negative, got {scale}")
    rng = np.random.default_rng(rng_seed)

    def draw(shape):
        return rng.uniform(-scale, scale, size=shape).astype(np.float32)

    return PtuParams(w_r=draw((2 * dim, dim)), w_z=draw((2 * dim, dim)),
                     w_h=draw((dim, dim)), phi=phi)


def ptu_forward(params: PtuParams, h_s: Tensor, h_t: Tensor,
                force_r: float | None = None, force_z: float | None = None,
                layer_index: int | None = None,
                w_r: Tensor | None = None, w_z: Tensor | None = None,
                w_h: Tensor | None = None) -> PtuOutput:
    """Blend a batch of source/target activations through one unit.

    ``h_s`` and ``h_t`` are [batch, dim].  Pass tracked tensors via
    ``w_r``/``w_z``/``w_h`` to train the unit weights; otherwise the arrays
    in ``params`` are used as constants.  ``force_r``/``force_z`` clamp a
    gate to a constant in [0, 1], bypassing its sigmoid; the degeneracy
    checks use this to drive the unit into its corner behaviours.
    """
    where = f" at junction {layer_index}" if layer_index is not None else ""
    d = params.dim
    if h_s.data.ndim != 2 or h_t.data.ndim != 2:
        raise ConfigError(f"activations must be 2-d{where}, got {h_s.shape} and {h_t.shape}")
    if h_s.shape != h_t.shape:
        raise ConfigError(f"source/target activations differ{where}: {h_s.shape} vs {h_t.shape}")
    if h_s.shape[1] != d:
        raise ConfigError(f"activation width {h_s.shape[1]} != unit width {d}{where}")
    for f, name in ((force_r, "force_r"), (force_z, "force_z")):
        if f is not None and not 0.0 <= f <= 1.0:
            raise ConfigError(f"{name} must lie in [0, 1], got {f}")

    wr = w_r if w_r is not None else T.Tensor(params.w_r, dtype=params.w_r.dtype)
    wz = w_z if w_z is not None else T.Tensor(params.w_z, dtype=params.w_z.dtype)
    wh = w_h if w_h is not None else T.Tensor(params.w_h, dtype=params.w_h.dtype)

    pair = T.concat(h_s, h_t, axis=1)
    if force_r is None:
        r = T.sigmoid(T.matmul(pair, wr))
    else:
        r = T.full_like(h_s, force_r)
    if force_z is None:
        z = T.sigmoid(T.matmul(pair, wz))
    else:
        z = T.full_like(h_s, force_z)

    remap = T.activation(params.phi, T.matmul(h_s, wh))
    ones = T.ones_like(r)
    adapted = T.add(T.mul(T.sub(ones, r), h_s), T.mul(r, remap))
    combined = T.add(T.mul(T.sub(ones, z), h_t), T.mul(z, adapted))
    return PtuOutput(combined=combined, r_gate=r, z_gate=z, adapted=adapted,
                     layer_index=layer_index)


def gate_statistics(outputs: list[PtuOutput], layer_index: int) -> GateStats:
    """Means and 10-bin histograms over every gate element in ``outputs``.

    All outputs must belong to the given junction; a recurrent assembly pools
    the outputs it collected for one time step across batches.
    """
    if not outputs:
        raise ContractError("gate_statistics: empty output list")
    for o in outputs:
        if o.layer_index is not None and o.layer_index != layer_index:
            raise ContractError(
                f"gate_statistics: output from junction {o.layer_index}, expected {layer_index}")
    rs = np.concatenate([o.r_gate.data.ravel() for o in outputs])
    zs = np.concatenate([o.z_gate.data.ravel() for o in outputs])
    edges = np.linspace(0.0, 1.0, GATE_HIST_BINS + 1)
    hr, _ = np.histogram(rs, bins=edges)
    hz, _ = np.histogram(zs, bins=edges)
    return GateStats(layer_index=layer_index,
                     mean_r=float(rs.mean()), mean_z=float(zs.mean()),
                     histogram_r=hr.tolist(), histogram_z=hz.tolist())


def collect_gate_stats(outputs: list[PtuOutput]) -> list[GateStats]:
    """Group outputs by junction and summarize each, ordered by index."""
    by_layer: dict[int, list[PtuOutput]] = {}
    for i, out in enumerate(outputs):
        key = out.layer_index if out.layer_index is not None else i
        by_layer.setdefault(key, []).append(out)
    return [gate_statistics(by_layer[k], k) for k in sorted(by_layer)]


def write_gate_stats_csv(stats: list[GateStats], path) -> None:
    """One row per junction: layer, gate means, then the two count histograms."""
    header = (["layer", "mean_r", "mean_z"]
              + [f"bin{i}_r" for i in range(GATE_HIST_BINS)]
              + [f"bin{i}_z" for i in range(GATE_HIST_BINS)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for s in stats:
            w.writerow([s.layer_index, f"{s.mean_r:.6f}", f"{s.mean_z:.6f}"]
                       + [str(c) for c in s.histogram_r]
                       + [str(c) for c in s.histogram_z])


def read_gate_stats_csv(path) -> list[GateStats]:
    """Inverse of write_gate_stats_csv, used by the reporting command."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    stats = []
    for row in rows[1:]:
        b = 3
        stats.append(GateStats(
            layer_index=int(row[0]), mean_r=float(row[1]), mean_z=float(row[2]),
            histogram_r=[int(c) for c in row[b:b + GATE_HIST_BINS]],
            histogram_z=[int(c) for c in row[b + GATE_HIST_BINS:b + 2 * GATE_HIST_BINS]]))
    return stats
