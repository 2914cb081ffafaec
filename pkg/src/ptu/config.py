"""Experiment configuration: flat dotted key=value files.

The format is deliberately trivial: one ``section.key=value`` per line,
``#`` comments, later duplicates win.  Example::

    setting=pair_demo
    arch=rnn
    methods=notl,ft,ptu,rg,knn
    source.dataset=digits
    target.dataset=greek
    dataset.digits.images=data/digits-images.idx
    dataset.digits.labels=data/digits-labels.idx
    dataset.digits.classes=10
    dataset.greek.images=data/greek-images.idx
    dataset.greek.labels=data/greek-labels.idx
    dataset.greek.classes=24
    train.lr_candidates=0.01,0.001
    train.lr_candidates.ft=0.01,0.001,0.0001
    train.max_steps=1500
    split.train=0.7
    reg.group=0.01
    rnn.hidden=128
    out=runs/pair_demo

Everything the commands do derives from one parsed file plus the command
line flags; no environment variables are consulted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .data import SplitSpec
from .errors import ConfigError
from .regularizers import GROUPINGS, PenaltyConfig
from .train import METHODS, TrainConfig

ARCHS = ("cnn", "rnn")
CNN_PRESETS = ("tiny", "lenet")


def parse_kv_text(text: str, origin: str = "<config>") -> dict[str, str]:
    """Parse flat dotted key=value lines into a dict; malformed lines raise."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{origin}:{lineno}: expected key=value, got {raw.strip()!r}")
        out[key] = value.strip()
    return out


class _KvView:
    """Typed access over the raw key/value dict with key-qualified errors."""

    def __init__(self, kv: dict[str, str]):
        self.kv = kv
        self.used: set[str] = set()

    def raw(self, key: str, default: str | None = None) -> str | None:
        self.used.add(key)
        return self.kv.get(key, default)

    def _conv(self, key: str, conv, default):
        v = self.raw(key)
        if v is None:
            return default
        try:
            return conv(v)
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {v!r} ({e})") from None

    def str_(self, key, default=None):
        return self._conv(key, str, default)

    def int_(self, key, default=None):
        return self._conv(key, int, default)

    def float_(self, key, default=None):
        return self._conv(key, float, default)

    def bool_(self, key, default=None):
        def conv(v: str) -> bool:
            low = v.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError("expected true/false")
        return self._conv(key, conv, default)

    def floats(self, key, default=None):
        return self._conv(key, lambda v: tuple(float(p) for p in v.split(",") if p.strip()),
                          default)

    def ints(self, key, default=None):
        return self._conv(key, lambda v: tuple(int(p) for p in v.split(",") if p.strip()),
                          default)

    def strs(self, key, default=None):
        return self._conv(key, lambda v: tuple(p.strip() for p in v.split(",") if p.strip()),
                          default)


@dataclass(frozen=True)
class DatasetRef:
    images: str
    labels: str
    classes: int


@dataclass
class ExperimentConfig:
    """A fully resolved experiment: datasets, architecture, methods, budgets."""

    setting: str
    arch: str
    methods: tuple[str, ...]
    source_dataset: str
    target_dataset: str
    registry: dict[str, DatasetRef]
    train: TrainConfig
    split: SplitSpec
    lr_overrides: dict[str, tuple[float, ...]] = field(default_factory=dict)
    knn_k: tuple[int, ...] = (1, 3, 5, 10)
    rnn_hidden: int = 128
    cnn_preset: str = "tiny"
    out_dir: str = "runs"
    source_checkpoint: str = ""

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if not self.methods:
            raise ConfigError("at least one method is required")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r}; expected a subset of {METHODS}")
        if self.cnn_preset not in CNN_PRESETS:
            raise ConfigError(f"cnn.preset must be one of {CNN_PRESETS}, got {self.cnn_preset!r}")
        for role, name in (("source", self.source_dataset), ("target", self.target_dataset)):
            if name and name not in self.registry:
                raise ConfigError(f"{role}.dataset={name!r} is not in the dataset registry")
        if not self.source_checkpoint:
            self.source_checkpoint = str(Path(self.out_dir) / f"{self.setting}_source.ptuc")

    def ref(self, name: str) -> DatasetRef:
        if name not in self.registry:
            raise ConfigError(f"dataset {name!r} is not in the registry")
        return self.registry[name]


def _registry_from(kv: dict[str, str], view: _KvView) -> dict[str, DatasetRef]:
    names = {k.split(".")[1] for k in kv if k.startswith("dataset.") and k.count(".") == 2}
    registry = {}
    for name in sorted(names):
        images = view.str_(f"dataset.{name}.images")
        labels = view.str_(f"dataset.{name}.labels")
        classes = view.int_(f"dataset.{name}.classes")
        if not images or not labels or classes is None:
            raise ConfigError(f"dataset.{name} needs images, labels, and classes keys")
        registry[name] = DatasetRef(images=images, labels=labels, classes=classes)
    return registry


def config_from_kv(kv: dict[str, str], seed_override: int | None = None,
                   out_override: str | None = None) -> ExperimentConfig:
    view = _KvView(kv)
    penalty = PenaltyConfig(
        l1=view.float_("reg.l1", 0.0), l2=view.float_("reg.l2", 0.0),
        group=view.float_("reg.group", 0.0),
        grouping=view.str_("reg.grouping", GROUPINGS[0]))
    candidates = view.floats("train.lr_candidates", (0.01, 0.001))
    train = TrainConfig(
        learning_rate=view.float_("train.lr", candidates[0]),
        batch_size=view.int_("train.batch_size", 128),
        max_steps=view.int_("train.max_steps", 1000),
        seed=seed_override if seed_override is not None else view.int_("train.seed", 0),
        penalty=penalty, lr_candidates=candidates,
        val_every=view.int_("train.val_every", 100))
    split = SplitSpec(
        train_frac=view.float_("split.train", 0.7),
        val_frac=view.float_("split.val", 0.15),
        test_frac=view.float_("split.test", 0.15),
        seed=view.int_("split.seed", 0),
        stratified=view.bool_("split.stratified", True))
    overrides = {}
    for m in METHODS:
        v = view.floats(f"train.lr_candidates.{m}")
        if v:
            overrides[m] = v
    out_dir = out_override if out_override is not None else view.str_("out", "runs")
    return ExperimentConfig(
        setting=view.str_("setting", "experiment"),
        arch=view.str_("arch", "rnn"),
        methods=view.strs("methods", ("notl", "ft", "ptu")),
        source_dataset=view.str_("source.dataset", ""),
        target_dataset=view.str_("target.dataset", ""),
        registry=_registry_from(kv, view),
        train=train, split=split, lr_overrides=overrides,
        knn_k=view.ints("knn.k", (1, 3, 5, 10)),
        rnn_hidden=view.int_("rnn.hidden", 128),
        cnn_preset=view.str_("cnn.preset", "tiny"),
        out_dir=out_dir,
        source_checkpoint=view.str_("source.checkpoint", ""))


def load_config(path, seed_override: int | None = None,
                out_override: str | None = None) -> ExperimentConfig:
    text = Path(path).read_text()
    return config_from_kv(parse_kv_text(text, origin=str(path)),
                          seed_override=seed_override, out_override=out_override)
