"""SGD training loop, baselines, hold-out selection, and method comparison.

The loop is define-by-run: each step builds a fresh tape through the model,
computes the regularized cross-entropy, and applies plain SGD to whatever
parameters were tracked.  Everything downstream of the loop (hold-out lr
selection, the fine-tuning strategy family, nearest-neighbour and
random-guess baselines, comparison tables) lives here too, so an experiment
is a handful of function calls over one task description.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import tensor as T
from .data import LabeledDataset, Splits
from .errors import ConfigError, ContractError, ShapeError
from .nets import (AssembledModel, NetworkSpec, PlainModel, TransferState,
                   apply_transfer_state, assemble_ptu_cnn, assemble_ptu_rnn,
                   build_params, forward, layer_count, predict, set_param)
from .regularizers import PenaltyConfig, total_regularized_loss
from .tensor import Tensor, backward, grad_for
from .unit import GateStats, collect_gate_stats

METHODS = ("notl", "ft", "ptu", "rg", "knn")

# Incremented per holdout_select call; lets tests assert the gated route
# needs a single selection pass where the strategy family needs L.
HOLDOUT_CALLS = 0


@dataclass
class TrainConfig:
    """One training run's knobs; the learning rate must come from the candidates."""

    learning_rate: float
    batch_size: int = 128
    max_steps: int = 1000
    seed: int = 0
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    lr_candidates: tuple[float, ...] = ()
    val_every: int = 100

    def __post_init__(self):
        if not self.lr_candidates:
            self.lr_candidates = (self.learning_rate,)
        if self.learning_rate not in self.lr_candidates:
            raise ConfigError(
                f"learning_rate {self.learning_rate} not in candidates {self.lr_candidates}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.val_every < 1:
            raise ConfigError(f"val_every must be >= 1, got {self.val_every}")


@dataclass
class ExperimentReport:
    """Curves and final numbers for one method on one task."""

    method: str
    train_loss_curve: list[tuple[int, float]] = field(default_factory=list)
    val_acc_curve: list[tuple[int, float]] = field(default_factory=list)
    test_accuracy: float = float("nan")
    selected_lr: float = float("nan")
    gate_stats: list[GateStats] | None = None
    diverged: bool = False


# ---------------------------------------------------------------------------
# loss, update, evaluation

def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood, stabilized through log-sum-exp."""
    y = np.asarray(labels)
    Z = logits.data
    if Z.ndim != 2:
        raise ShapeError(f"logits must be (batch, classes), got {logits.shape}")
    if y.shape != (Z.shape[0],):
        raise ShapeError(f"labels shape {y.shape} does not match batch {Z.shape[0]}")
    if y.min() < 0 or y.max() >= Z.shape[1]:
        raise ContractError(f"labels outside [0, {Z.shape[1]})")
    b = Z.shape[0]
    m = Z.max(axis=1, keepdims=True)
    exps = np.exp(Z - m)
    softmax = exps / exps.sum(axis=1, keepdims=True)
    nll = (m[:, 0] + np.log(exps.sum(axis=1))) - Z[np.arange(b), y]
    val = np.asarray([nll.mean()], dtype=Z.dtype)
    onehot = np.zeros_like(Z)
    onehot[np.arange(b), y] = 1.0

    def grad(g):
        return (g.reshape(()) * (softmax - onehot) / b,)

    return T.lift([logits], val, grad, op="cross_entropy")


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float,
             frozen: frozenset[str] = frozenset()) -> dict[str, np.ndarray]:
    """p <- p - lr*g for every non-frozen name; frozen arrays pass through."""
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if name in frozen or g is None:
            out[name] = p
        else:
            out[name] = p - np.asarray(lr, dtype=p.dtype) * g
    return out


def evaluate(model, ds: LabeledDataset, batch: int = 512) -> float:
    """Classification accuracy over a dataset, streamed in chunks."""
    hits = 0
    for lo in range(0, len(ds), batch):
        xs = Tensor(ds.images[lo:lo + batch])
        hits += int((predict(model, xs).argmax(axis=1) == ds.labels[lo:lo + batch]).sum())
    return hits / len(ds)


def _ptu_weight_tensors(env: dict[str, Tensor]) -> list[Tensor]:
    return [t for name, t in env.items() if name.startswith("ptu")]


def train(model, splits: Splits, cfg: TrainConfig, method: str = "model") -> ExperimentReport:
    """Run SGD for cfg.max_steps; never touches the test split.

    Train loss is recorded every step, validation accuracy every
    ``val_every`` steps and at the final step.  A non-finite loss aborts the
    run and pins its final validation accuracy to 0 so hold-out selection
    stays total.
    """
    for part, ds in zip(("train", "val", "test"), splits):
        if len(ds) < 1:
            raise ConfigError(f"empty {part} split")
    rng = np.random.default_rng(cfg.seed)
    n = len(splits.train)
    report = ExperimentReport(method=method, selected_lr=cfg.learning_rate)
    for step in range(1, cfg.max_steps + 1):
        idx = rng.integers(0, n, size=cfg.batch_size)
        x = Tensor(splits.train.images[idx])
        res = forward(model, x, track_gradients=True)
        loss = cross_entropy_loss(res.logits, splits.train.labels[idx])
        if cfg.penalty.active and isinstance(model, AssembledModel):
            loss = total_regularized_loss(loss, _ptu_weight_tensors(res.env), cfg.penalty)
        lv = loss.item()
        report.train_loss_curve.append((step, lv))
        if not math.isfinite(lv):
            report.diverged = True
            report.val_acc_curve.append((step, 0.0))
            break
        if loss.tracked:
            grads = backward(res.tape, loss)
            tracked = {nm: t for nm, t in res.env.items() if t.tracked}
            updated = sgd_step({nm: t.data for nm, t in tracked.items()},
                               {nm: grad_for(grads, t) for nm, t in tracked.items()},
                               cfg.learning_rate)
            for nm, arr in updated.items():
                set_param(model, nm, arr)
        if step % cfg.val_every == 0 or step == cfg.max_steps:
            report.val_acc_curve.append((step, evaluate(model, splits.val)))
    return report


def final_val_accuracy(report: ExperimentReport) -> float:
    if not report.val_acc_curve:
        return 0.0
    v = report.val_acc_curve[-1][1]
    return v if math.isfinite(v) else 0.0


def holdout_select(make_model: Callable[[], object], splits: Splits, cfg: TrainConfig,
                   method: str = "model", collect_gates: bool = False,
                   ) -> tuple[ExperimentReport, object]:
    """Train one fresh model per lr candidate; keep the best validation run.

    Candidates are visited in increasing order and replacement requires a
    strict improvement, so ties fall to the smaller learning rate.  The test
    split is consulted exactly once, for the winner.
    """
    global HOLDOUT_CALLS
    HOLDOUT_CALLS += 1
    if not cfg.lr_candidates:
        raise ConfigError("holdout_select: no learning-rate candidates")
    best: tuple[float, ExperimentReport, object] | None = None
    for lr in sorted(cfg.lr_candidates):
        model = make_model()
        rep = train(model, splits, replace(cfg, learning_rate=lr), method=method)
        fv = final_val_accuracy(rep)
        if best is None or fv > best[0]:
            best = (fv, rep, model)
    _, rep, model = best
    rep.test_accuracy = evaluate(model, splits.test)
    if collect_gates and isinstance(model, AssembledModel):
        rep.gate_stats = gate_stats_of(model, splits.train)
    return rep, model


def gate_stats_of(model: AssembledModel, ds: LabeledDataset,
                  max_samples: int = 256) -> list[GateStats]:
    """Gate summaries over a forward pass of the first few samples."""
    xs = Tensor(ds.images[:max_samples])
    res = forward(model, xs)
    return collect_gate_stats(res.ptu_outputs)


# ---------------------------------------------------------------------------
# fine-tuning strategy family

def enumerate_ft_strategies(L: int) -> list[tuple[TransferState, ...]]:
    """The L incremental-freezing strategies over an L-layer network.

    Strategy l (l = 0..L-1) freezes the first l layers and fine-tunes the
    rest, so the frozen prefix grows one layer at a time and every layer is
    trainable in at least one strategy.  This linear family is what makes
    the discrete choice tractable against the exponential full space of
    per-layer state assignments.
    """
    if L < 1:
        raise ContractError(f"enumerate_ft_strategies: L must be >= 1, got {L}")
    return [(TransferState.FROZEN,) * l + (TransferState.FINE_TUNE,) * (L - l)
            for l in range(L)]


# ---------------------------------------------------------------------------
# non-gradient baselines

def knn_classify(train_images: np.ndarray, train_labels: np.ndarray,
                 query: np.ndarray, k: int) -> int:
    """Majority label of the k nearest training points in pixel space.

    Neighbour order is by euclidean distance with a stable sort, so equal
    distances resolve by training-set position; label ties resolve to the
    smallest label id.
    """
    n = train_images.shape[0]
    if n == 0:
        raise ContractError("knn_classify: empty training set")
    if not 1 <= k <= n:
        raise ContractError(f"knn_classify: k={k} outside [1, {n}]")
    flat = train_images.reshape(n, -1).astype(np.float64)
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    d2 = ((flat - q) ** 2).sum(axis=1)
    order = np.argsort(d2, kind="stable")[:k]
    counts = np.bincount(train_labels[order])
    return int(counts.argmax())


def knn_predict(train_images: np.ndarray, train_labels: np.ndarray,
                queries: np.ndarray, k: int) -> np.ndarray:
    """Vectorized nearest-neighbour labels for a batch of queries."""
    n = train_images.shape[0]
    if n == 0:
        raise ContractError("knn_predict: empty training set")
    if not 1 <= k <= n:
        raise ContractError(f"knn_predict: k={k} outside [1, {n}]")
    flat = train_images.reshape(n, -1).astype(np.float64)
    qs = queries.reshape(queries.shape[0], -1).astype(np.float64)
    d2 = (qs ** 2).sum(axis=1)[:, None] - 2.0 * qs @ flat.T + (flat ** 2).sum(axis=1)[None, :]
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    out = np.empty(qs.shape[0], dtype=np.int64)
    for i in range(qs.shape[0]):
        out[i] = np.bincount(train_labels[order[i]]).argmax()
    return out


def random_guess(classes: int, rng: np.random.Generator) -> int:
    """A uniform label; expected accuracy 1/classes."""
    if classes < 1:
        raise ConfigError(f"random_guess: classes must be >= 1, got {classes}")
    return int(rng.integers(0, classes))


# ---------------------------------------------------------------------------
# experiment orchestration

@dataclass
class TransferTask:
    """Everything one transfer experiment needs: source model, target spec, data."""

    source: PlainModel
    target_spec: NetworkSpec
    splits: Splits

    @property
    def phi(self) -> str:
        return "tanh" if self.target_spec.is_recurrent else "relu"


def _coerce_output_state(task: TransferTask,
                         states: tuple[TransferState, ...]) -> tuple[TransferState, ...]:
    """Force a fresh output layer when the label spaces differ.

    Copy states need matching shapes; a target with its own class count can
    never inherit the source's output weights.
    """
    src_classes = task.source.spec.classes
    if task.target_spec.classes == src_classes:
        return states
    return states[:-1] + (TransferState.RANDOM,)


def run_notl(task: TransferTask, cfg: TrainConfig) -> tuple[ExperimentReport, object]:
    factory = lambda: PlainModel(task.target_spec, build_params(task.target_spec, cfg.seed))
    return holdout_select(factory, task.splits, cfg, method="notl")


def run_ft_family(task: TransferTask, cfg: TrainConfig) -> list[tuple[ExperimentReport, object]]:
    """One hold-out selection per incremental-freezing strategy."""
    results = []
    L = layer_count(task.target_spec)
    for l, states in enumerate(enumerate_ft_strategies(L)):
        states = _coerce_output_state(task, states)

        def factory(states=states):
            fresh = build_params(task.target_spec, cfg.seed)
            params, frozen = apply_transfer_state(fresh, task.source.params, states)
            return PlainModel(task.target_spec, params, frozen)

        results.append(holdout_select(factory, task.splits, cfg, method=f"ft_{l}"))
    return results


def run_ptu(task: TransferTask, cfg: TrainConfig) -> tuple[ExperimentReport, object]:
    """The gated assembly, selected in a single hold-out pass."""
    spec = task.target_spec
    if spec.is_recurrent:
        factory = lambda: assemble_ptu_rnn(task.source.params, spec, cfg.seed, phi=task.phi)
    else:
        factory = lambda: assemble_ptu_cnn(task.source.params, spec, cfg.seed, phi=task.phi)
    return holdout_select(factory, task.splits, cfg, method="ptu", collect_gates=True)


def run_rg(task: TransferTask, cfg: TrainConfig) -> ExperimentReport:
    rng = np.random.default_rng(cfg.seed)
    test = task.splits.test
    guesses = np.array([random_guess(test.class_count, rng) for _ in range(len(test))])
    return ExperimentReport(method="rg",
                            test_accuracy=float((guesses == test.labels).mean()))


def run_knn(task: TransferTask, k_candidates: tuple[int, ...] = (1, 3, 5, 10),
            ) -> ExperimentReport:
    """Pick k on the validation split, then score the test split once."""
    if not k_candidates:
        raise ConfigError("run_knn: no k candidates")
    tr, va, te = task.splits
    best_k, best_acc = None, -1.0
    for k in sorted(k_candidates):
        if k > len(tr):
            continue
        pred = knn_predict(tr.images, tr.labels, va.images, k)
        acc = float((pred == va.labels).mean())
        if acc > best_acc:
            best_k, best_acc = k, acc
    if best_k is None:
        raise ConfigError(f"run_knn: all candidates exceed {len(tr)} training samples")
    pred = knn_predict(tr.images, tr.labels, te.images, best_k)
    return ExperimentReport(method=f"knn_{best_k}",
                            test_accuracy=float((pred == te.labels).mean()))


def run_methods(task: TransferTask, cfg: TrainConfig, methods: tuple[str, ...],
                lr_overrides: dict[str, tuple[float, ...]] | None = None,
                k_candidates: tuple[int, ...] = (1, 3, 5, 10),
                ) -> list[ExperimentReport]:
    """Run the requested methods with per-method learning-rate candidate sets."""
    lr_overrides = lr_overrides or {}

    def method_cfg(name: str) -> TrainConfig:
        cands = tuple(lr_overrides.get(name, cfg.lr_candidates))
        return replace(cfg, learning_rate=cands[0], lr_candidates=cands)

    reports = []
    for m in methods:
        if m == "notl":
            reports.append(run_notl(task, method_cfg(m))[0])
        elif m == "ft":
            reports.extend(rep for rep, _ in run_ft_family(task, method_cfg(m)))
        elif m == "ptu":
            reports.append(run_ptu(task, method_cfg(m))[0])
        elif m == "rg":
            reports.append(run_rg(task, cfg))
        elif m == "knn":
            reports.append(run_knn(task, k_candidates))
        else:
            raise ConfigError(f"unknown method {m!r}; expected one of {METHODS}")
    return reports


# ---------------------------------------------------------------------------
# comparison and serialization

@dataclass
class MethodComparison:
    reports: list[ExperimentReport]
    best_ft_method: str
    best_ft_accuracy: float
    ptu_accuracy: float
    delta_pct: float


def compare_methods(reports: list[ExperimentReport]) -> MethodComparison:
    """Relative improvement of the gated assembly over the best strategy run.

    delta(%) = 100 * (acc_ptu - acc_best_ft) / acc_best_ft, where best_ft
    maximizes test accuracy over the ft_* reports.
    """
    ptu = next((r for r in reports if r.method == "ptu"), None)
    if ptu is None:
        raise ContractError("compare_methods: no ptu report")
    fts = [r for r in reports if r.method.startswith("ft")]
    if not fts:
        raise ContractError("compare_methods: no ft report to compare against")
    best = max(fts, key=lambda r: r.test_accuracy)
    delta = 100.0 * (ptu.test_accuracy - best.test_accuracy) / best.test_accuracy
    return MethodComparison(reports=list(reports), best_ft_method=best.method,
                            best_ft_accuracy=best.test_accuracy,
                            ptu_accuracy=ptu.test_accuracy, delta_pct=delta)


def report_filename(setting: str, method: str) -> str:
    return f"{setting}_{method}.csv"


def write_report_csv(report: ExperimentReport, path) -> None:
    """Curve file: one row per validation checkpoint (step,train_loss,val_acc)."""
    loss_at = dict(report.train_loss_curve)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "train_loss", "val_acc"])
        for step, acc in report.val_acc_curve:
            lv = loss_at.get(step)
            w.writerow([step, "" if lv is None else f"{lv:.6f}", f"{acc:.6f}"])


def format_lr(lr: float) -> str:
    return "" if not math.isfinite(lr) else f"{lr:g}"


def write_summary_csv(reports: list[ExperimentReport], path) -> None:
    """Summary table: method,selected_lr,test_accuracy,delta_vs_best_ft."""
    delta_for = {}
    try:
        cmp = compare_methods(reports)
        delta_for["ptu"] = f"{cmp.delta_pct:.2f}"
    except ContractError:
        pass
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "selected_lr", "test_accuracy", "delta_vs_best_ft"])
        for r in reports:
            w.writerow([r.method, format_lr(r.selected_lr),
                        f"{r.test_accuracy:.4f}", delta_for.get(r.method, "")])
