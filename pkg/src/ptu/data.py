"""Dataset ingestion, deterministic splitting, resizing, and synthetic data.

Real datasets enter through the IDX container (the classic big-endian
handwritten-digit format).  Because this toolkit must run with no network
access, it also ships two generator families:

* :func:`synth_transfer_pair` draws class-conditional Gaussian mixtures from
  latent factors, with a dial controlling how many factors the two domains
  share.  It gives a ground-truth notion of transferability for tests.
* :func:`synth_glyphs` rasterizes jittered multi-stroke skeletons, a stand-in
  for handwritten characters: each class has a fixed skeleton, each sample a
  perturbed rendering.  Alphabets of any size are cheap to mint.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, ParseError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    """Images (n, C, H, W) in [0, 1] with integer labels in [0, class_count)."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = ""

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] < 1:
            raise ConfigError(f"images must be (n, C, H, W) with n >= 1, got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ConfigError(
                f"labels shape {self.labels.shape} does not match {self.images.shape[0]} images")
        if self.class_count < 1:
            raise ConfigError(f"class_count must be >= 1, got {self.class_count}")
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ConfigError("labels outside [0, class_count)")
        lo, hi = float(self.images.min()), float(self.images.max())
        if lo < 0.0 or hi > 1.0:
            raise ConfigError(f"pixels must lie in [0, 1], got range [{lo}, {hi}]")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, idx: np.ndarray, name: str | None = None) -> "LabeledDataset":
        return LabeledDataset(self.images[idx], self.labels[idx], self.class_count,
                              name if name is not None else self.name)


class Splits(NamedTuple):
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.7
    val_frac: float = 0.15
    test_frac: float = 0.15
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(not 0.0 < f < 1.0 for f in fracs):
            raise ConfigError(f"split fractions must lie in (0, 1), got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {sum(fracs)}")


# ---------------------------------------------------------------------------
# IDX container

def _read_exact(blob: bytes, pos: int, n: int, what: str) -> bytes:
    if pos + n > len(blob):
        raise ParseError(f"truncated IDX file: expected {what}", offset=pos)
    return blob[pos:pos + n]


def load_idx(image_path, label_path, name: str | None = None,
             class_count: int | None = None) -> LabeledDataset:
    """Parse a big-endian IDX image/label pair into a normalized dataset."""
    img_blob = Path(image_path).read_bytes()
    lbl_blob = Path(label_path).read_bytes()

    (magic,) = struct.unpack(">I", _read_exact(img_blob, 0, 4, "image magic"))
    if magic != IDX_IMAGES_MAGIC:
        raise ParseError(f"bad image magic 0x{magic:08x}", offset=0)
    n, h, w = struct.unpack(">III", _read_exact(img_blob, 4, 12, "image dims"))
    pixels = _read_exact(img_blob, 16, n * h * w, f"{n * h * w} pixel bytes")
    if len(img_blob) != 16 + n * h * w:
        raise ParseError("trailing bytes after image payload", offset=16 + n * h * w)

    (lmagic,) = struct.unpack(">I", _read_exact(lbl_blob, 0, 4, "label magic"))
    if lmagic != IDX_LABELS_MAGIC:
        raise ParseError(f"bad label magic 0x{lmagic:08x}", offset=0)
    (ln,) = struct.unpack(">I", _read_exact(lbl_blob, 4, 4, "label count"))
    if ln != n:
        raise ParseError(f"label count {ln} != image count {n}", offset=4)
    labels_raw = _read_exact(lbl_blob, 8, ln, f"{ln} label bytes")
    if len(lbl_blob) != 8 + ln:
        raise ParseError("trailing bytes after label payload", offset=8 + ln)

    images = np.frombuffer(pixels, dtype=np.uint8).reshape(n, 1, h, w)
    labels = np.frombuffer(labels_raw, dtype=np.uint8).astype(np.int64)
    cc = class_count if class_count is not None else int(labels.max()) + 1
    return LabeledDataset((images / np.float32(255.0)).astype(np.float32), labels, cc,
                          name or Path(image_path).stem)


def save_idx(ds: LabeledDataset, image_path, label_path) -> None:
    """Write a dataset as an IDX pair; pixels quantized to u8."""
    n, c, h, w = ds.images.shape
    if c != 1:
        raise ConfigError(f"IDX stores single-channel images, got {c} channels")
    if ds.class_count > 256:
        raise ConfigError("IDX labels are u8; class_count > 256 does not fit")
    pixels = np.round(ds.images[:, 0] * 255.0).astype(np.uint8)
    with open(image_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(pixels.tobytes())
    with open(label_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(ds.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# splitting and resizing

def _cut(m: int, spec: SplitSpec) -> tuple[int, int]:
    # floor for train and val; the remainder is test (20 -> 14/3/3 at 70/15/15)
    return int(np.floor(spec.train_frac * m)), int(np.floor(spec.val_frac * m))


def split(ds: LabeledDataset, spec: SplitSpec) -> Splits:
    """Disjoint, exhaustive train/val/test partition, deterministic per seed."""
    rng = np.random.default_rng(spec.seed)
    parts: dict[str, list[np.ndarray]] = {"train": [], "val": [], "test": []}
    if spec.stratified:
        for c in range(ds.class_count):
            idx = np.flatnonzero(ds.labels == c)
            if idx.size < 3:
                raise ConfigError(
                    f"cannot stratify: class {c} has {idx.size} samples, needs >= 3")
            order = rng.permutation(idx)
            n_tr, n_val = _cut(idx.size, spec)
            if n_tr == 0 or n_val == 0 or idx.size - n_tr - n_val == 0:
                raise ConfigError(f"class {c}: fractions leave an empty split")
            parts["train"].append(order[:n_tr])
            parts["val"].append(order[n_tr:n_tr + n_val])
            parts["test"].append(order[n_tr + n_val:])
    else:
        order = rng.permutation(len(ds))
        n_tr, n_val = _cut(len(ds), spec)
        if n_tr == 0 or n_val == 0 or len(ds) - n_tr - n_val == 0:
            raise ConfigError("fractions leave an empty split")
        parts["train"].append(order[:n_tr])
        parts["val"].append(order[n_tr:n_tr + n_val])
        parts["test"].append(order[n_tr + n_val:])
    out = {k: ds.subset(np.concatenate(v), name=f"{ds.name}/{k}") for k, v in parts.items()}
    return Splits(out["train"], out["val"], out["test"])


def resize_bilinear(ds: LabeledDataset, target_hw: tuple[int, int]) -> LabeledDataset:
    """Corner-aligned bilinear resize; an output axis of 1 samples the center."""
    ho, wo = target_hw
    if ho < 1 or wo < 1:
        raise ConfigError(f"target dims must be >= 1, got {target_hw}")
    n, c, h, w = ds.images.shape

    def grid(out_dim: int, in_dim: int) -> np.ndarray:
        if out_dim == 1:
            return np.full(1, (in_dim - 1) / 2.0)
        return np.arange(out_dim) * (in_dim - 1) / (out_dim - 1)

    ys, xs = grid(ho, h), grid(wo, w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0).astype(np.float32)
    wx = (xs - x0).astype(np.float32)

    im = ds.images
    top = im[:, :, y0][:, :, :, x0] * (1 - wy)[None, None, :, None] \
        + im[:, :, y1][:, :, :, x0] * wy[None, None, :, None]
    bot = im[:, :, y0][:, :, :, x1] * (1 - wy)[None, None, :, None] \
        + im[:, :, y1][:, :, :, x1] * wy[None, None, :, None]
    out = top * (1 - wx)[None, None, None, :] + bot * wx[None, None, None, :]
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return LabeledDataset(out, ds.labels.copy(), ds.class_count, ds.name)


def subset_per_class(ds: LabeledDataset, per_class: int, seed: int = 0) -> LabeledDataset:
    """Keep a fixed number of samples from each class (scarce-data settings)."""
    rng = np.random.default_rng(seed)
    keep = []
    for c in range(ds.class_count):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size < per_class:
            raise ConfigError(f"class {c} has {idx.size} samples, wanted {per_class}")
        keep.append(rng.permutation(idx)[:per_class])
    return ds.subset(np.concatenate(keep))


# ---------------------------------------------------------------------------
# synthetic factor-model transfer pairs

def synth_transfer_pair(source_classes: int, target_classes: int,
                        shared_factor_fraction: float, n_per_class: int, seed: int,
                        image_hw: int = 8, n_factors: int = 16,
                        mean_scale: float = 4.0, sample_scale: float = 1.0,
                        pixel_noise: float = 0.02, n_nuisance: int = 0,
                        nuisance_scale: float = 0.0) -> tuple[LabeledDataset, LabeledDataset]:
    """Two class-conditional Gaussian-mixture image domains with tunable overlap.

    Each domain draws class means from latent factor directions (orthonormal
    pixel-space columns).  A ``shared_factor_fraction`` of the factors, and
    the per-class coefficients on them, are common to both domains; the rest
    are domain-private.  At 1.0 with equal class counts, the two domains have
    identical class structure; at 0.0 the class-relevant subspaces are
    orthogonal, so nothing learned on one domain transfers to the other.

    ``n_nuisance`` extra factor directions carry zero class mean but
    ``nuisance_scale`` sample variance.  They split shared/private by the
    same fraction, so a model fit on plentiful source data learns to damp
    exactly the nuisance variation that recurs (or does not) in the target.
    A scarce-data learner has to average the nuisance out of its few
    examples instead, which is what makes transfer worth anything here.

    Pixels pass through a logistic squash to land in [0, 1]; the gain keeps
    the squash in its near-linear band so the orthogonality of the factor
    subspaces survives into pixel space.
    """
    if not 0.0 <= shared_factor_fraction <= 1.0:
        raise ConfigError(f"shared_factor_fraction must be in [0, 1], got {shared_factor_fraction}")
    if source_classes < 2 or target_classes < 2:
        raise ConfigError("both domains need at least 2 classes")
    if n_per_class < 1:
        raise ConfigError(f"n_per_class must be >= 1, got {n_per_class}")
    if n_nuisance < 0 or nuisance_scale < 0.0:
        raise ConfigError("nuisance settings must be non-negative")
    p = image_hw * image_hw
    frac = shared_factor_fraction
    n_shared = int(round(frac * n_factors))
    n_private = n_factors - n_shared
    nn_shared = int(round(frac * n_nuisance))
    nn_private = n_nuisance - nn_shared
    total_cols = (n_shared + 2 * n_private) + (nn_shared + 2 * nn_private)
    if total_cols > p:
        raise ConfigError(
            f"{n_factors}+{n_nuisance} factors at fraction {frac} need "
            f"{total_cols} directions but only {p} pixels exist")

    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((p, max(total_cols, 1))))
    offs = np.cumsum([0, n_shared, n_private, n_private,
                      nn_shared, nn_private, nn_private])
    shared, priv_s, priv_t, nshared, npriv_s, npriv_t = (
        basis[:, a:b] for a, b in zip(offs[:-1], offs[1:]))
    # per-pixel std of the latent signal; aim the squash argument at ~1.2 std
    pixel_std = np.sqrt((mean_scale ** 2 + sample_scale ** 2 + nuisance_scale ** 2) / p
                        + pixel_noise ** 2)
    gain = 1.2 / pixel_std

    def make_domain(classes: int, private: np.ndarray, nuis_private: np.ndarray,
                    dom_tag: int, name: str) -> LabeledDataset:
        cols = np.concatenate([shared, private], axis=1)  # (p, n_factors)
        means = np.zeros((classes, p))
        for ci in range(classes):
            coef_shared = np.random.default_rng([seed, 7, ci]).standard_normal(n_shared)
            coef_priv = np.random.default_rng([seed, 11 + dom_tag, ci]).standard_normal(n_private)
            coef = np.concatenate([coef_shared, coef_priv]) * (mean_scale / np.sqrt(n_factors))
            means[ci] = cols @ coef
        dom_rng = np.random.default_rng([seed, 17 + dom_tag])
        n = classes * n_per_class
        labels = np.repeat(np.arange(classes), n_per_class)
        z = dom_rng.standard_normal((n, n_factors)) * (sample_scale / np.sqrt(n_factors))
        x = means[labels] + z @ cols.T
        if n_nuisance:
            nuis_cols = np.concatenate([nshared, nuis_private], axis=1)
            zn = dom_rng.standard_normal((n, n_nuisance)) * (nuisance_scale / np.sqrt(n_nuisance))
            x += zn @ nuis_cols.T
        x += pixel_noise * dom_rng.standard_normal((n, p))
        imgs = (1.0 / (1.0 + np.exp(-gain * x))).astype(np.float32)
        return LabeledDataset(imgs.reshape(n, 1, image_hw, image_hw),
                              labels.astype(np.int64), classes, name)

    src = make_domain(source_classes, priv_s, npriv_s, 0, f"factor_src_s{seed}")
    tgt = make_domain(target_classes, priv_t, npriv_t, 1, f"factor_tgt_s{seed}")
    return src, tgt


# ---------------------------------------------------------------------------
# synthetic stroke glyphs

def _bezier_points(p0, p1, p2, n: int) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)[:, None]
    return ((1 - t) ** 2) * p0 + 2 * (1 - t) * t * p1 + (t ** 2) * p2


def _render_strokes(strokes: list[np.ndarray], hw: int, thickness: float) -> np.ndarray:
    img = np.zeros((hw, hw), dtype=np.float64)
    yy, xx = np.mgrid[0:hw, 0:hw]
    for pts in strokes:
        for y, x in pts:
            img += np.exp(-((yy - y) ** 2 + (xx - x) ** 2) / (2.0 * thickness ** 2))
    return np.clip(img, 0.0, 1.0)


_PRIMITIVE_COUNT = 20


def _stroke_primitives() -> np.ndarray:
    """Fixed pen-stroke inventory shared by every glyph domain.

    Returns (M, 3, 2) quadratic control points in the unit square.  All
    alphabets and the digit set compose their characters from these same
    curves, the way scripts share a vocabulary of pen movements; that shared
    substructure is what makes features learned on one glyph domain worth
    carrying to another.
    """
    rng = np.random.default_rng(83)
    prims = rng.uniform(0.0, 1.0, size=(_PRIMITIVE_COUNT, 3, 2))
    # pull the control point outward so curves bow instead of wiggle
    mid = (prims[:, 0] + prims[:, 2]) / 2
    prims[:, 1] = mid + 1.5 * (prims[:, 1] - mid)
    return prims


def synth_glyphs(classes: int, n_per_class: int, seed: int, image_hw: int = 28,
                 n_strokes: tuple[int, int] = (3, 5), jitter: float = 1.2,
                 shift: int = 3, rotation: float = 0.35,
                 scale_range: tuple[float, float] = (0.8, 1.2),
                 pixel_noise: float = 0.03, name: str = "") -> LabeledDataset:
    """A glyph alphabet: per class a fixed stroke layout, per sample a jitter.

    Each class places a handful of curves from the shared primitive
    inventory at class-specific positions, scales and orientations.
    Samples perturb the control points, then rotate, rescale and translate
    the whole glyph and vary stroke thickness, so instances of a class
    share structure without being pixel-aligned.  The affine part acts on
    the control points, which is exact for quadratic curves.
    """
    if classes < 1 or n_per_class < 1:
        raise ConfigError("classes and n_per_class must be >= 1")
    prims = _stroke_primitives()
    margin = round(image_hw * 0.18)
    lo, hi = margin, image_hw - 1 - margin
    center = (image_hw - 1) / 2.0
    jitter = jitter * image_hw / 28.0
    images = np.zeros((classes * n_per_class, 1, image_hw, image_hw), dtype=np.float32)
    labels = np.repeat(np.arange(classes), n_per_class).astype(np.int64)

    for ci in range(classes):
        crng = np.random.default_rng([seed, 23, ci])
        k = int(crng.integers(n_strokes[0], n_strokes[1] + 1))
        skeleton = []
        for pi in crng.integers(0, _PRIMITIVE_COUNT, size=k):
            pos = crng.uniform(lo, hi, size=2)
            size = crng.uniform(0.35, 0.6) * image_hw
            theta = crng.uniform(-0.4, 0.4)
            rot = size * np.array([[np.cos(theta), -np.sin(theta)],
                                   [np.sin(theta), np.cos(theta)]])
            skeleton.append((prims[pi] - 0.5) @ rot.T + pos)
        srng = np.random.default_rng([seed, 29, ci])
        for si in range(n_per_class):
            theta = srng.uniform(-rotation, rotation)
            s = srng.uniform(*scale_range)
            rot = s * np.array([[np.cos(theta), -np.sin(theta)],
                                [np.sin(theta), np.cos(theta)]])
            move = srng.integers(-shift, shift + 1, size=2)
            strokes = []
            for placed in skeleton:
                pts = placed + srng.normal(0.0, jitter, size=(3, 2))
                pts = (pts - center) @ rot.T + center + move
                strokes.append(_bezier_points(pts[0], pts[1], pts[2], n=24))
            thickness = float(srng.uniform(0.7, 1.3)) * image_hw / 28.0
            img = _render_strokes(strokes, image_hw, thickness)
            img += srng.normal(0.0, pixel_noise, size=img.shape)
            images[ci * n_per_class + si, 0] = np.clip(img, 0.0, 1.0)
    return LabeledDataset(images, labels, classes, name or f"glyphs{classes}_s{seed}")


def glyph_alphabet_suite(seed: int = 0, n_per_class: int = 20,
                         class_counts: tuple[int, ...] = (24, 26, 40, 52, 47),
                         image_hw: int = 28, **variation) -> list[LabeledDataset]:
    """Five alphabets of differing sizes, the desk-scale character targets.

    ``variation`` forwards per-sample perturbation knobs (jitter, shift,
    rotation, scale_range, pixel_noise) to the generator, so a caller can
    dial the within-class spread for the whole suite at once.
    """
    kw = {"shift": max(1, round(3 * image_hw / 28)), **variation}
    return [synth_glyphs(c, n_per_class, seed=seed * 1000 + 7 * i + 1,
                         image_hw=image_hw, name=f"alphabet{i}_c{c}", **kw)
            for i, c in enumerate(class_counts)]


def glyph_digits(seed: int = 0, n_per_class: int = 300,
                 image_hw: int = 28, **variation) -> LabeledDataset:
    """A 10-class glyph set standing in for the handwritten-digit source domain."""
    kw = {"shift": max(1, round(3 * image_hw / 28)), **variation}
    return synth_glyphs(10, n_per_class, seed=seed * 1000 + 999,
                        image_hw=image_hw, name="digits_like", **kw)
