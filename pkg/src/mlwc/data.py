"""Datasets with disjoint base/novel label spaces, episode sampling, crops."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import ndimage

from .netpbm import NetpbmError, read_netpbm, write_netpbm


class DataError(ValueError):
    """Malformed, missing or insufficient data."""


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray  # (N, C, H, W), values in [0, 1]
    labels: np.ndarray  # (N,) int
    label_space: tuple[str, ...]
    role: str  # "base" | "novel"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.label_space)):
            raise DataError("label index outside the label space")
        if self.role not in ("base", "novel"):
            raise DataError(f"role must be 'base' or 'novel', got {self.role!r}")

    def __len__(self):
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return len(self.label_space)

    def indices_of(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)


@dataclass(frozen=True)
class DatasetPair:
    base_train: LabeledDataset
    base_test: LabeledDataset
    novel_train_pool: LabeledDataset
    novel_test: LabeledDataset

    def __post_init__(self):
        if self.base_train.label_space != self.base_test.label_space:
            raise DataError("base train/test label spaces differ")
        if self.novel_train_pool.label_space != self.novel_test.label_space:
            raise DataError("novel train/test label spaces differ")
        shared = set(self.base_train.label_space) & set(self.novel_train_pool.label_space)
        if shared:
            raise DataError(f"base and novel label spaces overlap: {sorted(shared)}")


# ---------------------------------------------------------------------------
# synthetic generator

MOTIF_SIZE = 7
_N_ORIENT = 4
_N_FREQ = 2
_N_LAYOUT_DIRS = 8
_N_LAYOUT_LEVELS = 2
_PALETTE = np.array(
    [
        [1.0, 0.2, 0.2],
        [0.2, 1.0, 0.2],
        [0.2, 0.3, 1.0],
        [1.0, 1.0, 0.2],
        [1.0, 0.2, 1.0],
        [0.2, 1.0, 1.0],
        [1.0, 0.6, 0.2],
        [0.7, 0.7, 0.7],
    ]
)


@dataclass(frozen=True)
class SynthSpec:
    image_size: int = 32
    channels: int = 3
    n_base_classes: int = 8
    n_novel_classes: int = 8
    samples_per_class: int = 50
    test_per_class: int = 20
    noise_sigma: float = 0.1
    seed: int = 7
    base_family: str = "A"
    novel_family: str = "A"
    jitter: int = 2
    n_stamps: int = 3

    def __post_init__(self):
        for name in ("image_size", "n_base_classes", "n_novel_classes", "samples_per_class", "test_per_class", "n_stamps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if self.noise_sigma < 0 or self.jitter < 0:
            raise ValueError("noise_sigma and jitter must be nonnegative")
        for fam in (self.base_family, self.novel_family):
            if fam not in _FAMILIES:
                raise ValueError(f"unknown motif family {fam!r}")
        if self.image_size < MOTIF_SIZE + 2 * self.jitter:
            raise ValueError("image too small for the motif")


@lru_cache(maxsize=None)
def _grating_motifs() -> tuple[np.ndarray, ...]:
    r = np.arange(MOTIF_SIZE) - MOTIF_SIZE // 2
    yy, xx = np.meshgrid(r, r, indexing="ij")
    envelope = np.exp(-(xx**2 + yy**2) / (2 * 2.0**2))
    motifs = []
    for f in (1 / 3, 1 / 6):
        for k in range(_N_ORIENT):
            theta = np.pi * k / _N_ORIENT
            u = xx * np.cos(theta) + yy * np.sin(theta)
            motifs.append(envelope * (0.5 + 0.5 * np.cos(2 * np.pi * f * u)))
    return tuple(motifs)


@lru_cache(maxsize=None)
def _shape_motifs() -> tuple[np.ndarray, ...]:
    r = np.arange(MOTIF_SIZE) - MOTIF_SIZE // 2
    yy, xx = np.meshgrid(r, r, indexing="ij")
    rad = np.hypot(xx, yy)
    ang = np.arctan2(yy, xx)
    m = MOTIF_SIZE // 2
    shapes = [
        (np.abs(rad - 2.5) < 0.8),  # ring
        (np.abs(xx) < 1) | (np.abs(yy) < 1),  # plus
        (np.abs(xx - yy) < 1) | (np.abs(xx + yy) < 1),  # cross
        (np.maximum(np.abs(xx), np.abs(yy)) == m),  # square outline
        (rad < 1.6),  # dot
        (np.cos(3 * ang) > 0.3) & (rad < 3.5),  # three lobes
        ((xx + m) // 2 + (yy + m) // 2) % 2 == 0,  # checker
        (np.abs(yy) < 1) & (np.abs(xx) <= m),  # horizontal bar
    ]
    return tuple(s.astype(np.float64) for s in shapes)


# family -> (motif pool, global layout style)
_FAMILIES = {"A": (_grating_motifs, "ramp"), "B": (_shape_motifs, "spot")}


@dataclass(frozen=True)
class Archetype:
    motif: int
    direction: int
    level: int
    anchors: tuple[tuple[int, int], ...] = field(default=())

    def name(self, family: str) -> str:
        return f"{family}-m{self.motif}-d{self.direction}-l{self.level}"


_N_MOTIFS = len(_PALETTE)  # motif i is always drawn in palette color i
_N_LAYOUTS = _N_LAYOUT_DIRS * _N_LAYOUT_LEVELS


def archetype_pool_size() -> int:
    return _N_MOTIFS * _N_LAYOUTS


def _draw_archetypes(rng: np.random.Generator, counts: tuple[int, ...], spec: SynthSpec) -> list[list[Archetype]]:
    """Archetypes for each split, drawn together without replacement from one pool.

    Classes of a split may share a motif or a layout, never both.
    """
    pool = archetype_pool_size()
    if sum(counts) > pool:
        raise DataError(f"requested {sum(counts)} class archetypes but only {pool} exist")
    picks = rng.choice(pool, size=sum(counts), replace=False)
    span = spec.image_size - MOTIF_SIZE - 2 * spec.jitter
    out = []
    for p in picks:
        motif, layout = divmod(int(p), _N_LAYOUTS)
        direction, level = divmod(layout, _N_LAYOUT_LEVELS)
        anchors = tuple(
            (int(y) + spec.jitter, int(x) + spec.jitter) for y, x in rng.integers(0, span + 1, size=(spec.n_stamps, 2))
        )
        out.append(Archetype(motif, direction, level, anchors))
    splits, start = [], 0
    for count in counts:
        splits.append(out[start : start + count])
        start += count
    return splits


def _layout(arch: Archetype, size: int, channels: int, style: str) -> np.ndarray:
    coords = (np.arange(size) + 0.5) / size - 0.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    theta = 2 * np.pi * arch.direction / _N_LAYOUT_DIRS
    level = (0.2, 0.45)[arch.level]
    if style == "ramp":
        img = level + 0.35 * (xx * np.cos(theta) + yy * np.sin(theta))
    else:  # off-centre bright spot
        cy, cx = 0.3 * np.sin(theta), 0.3 * np.cos(theta)
        img = level - 0.1 + 0.3 * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * 0.2**2))
    return np.repeat(img[None], channels, axis=0)


def _render(arch: Archetype, family: str, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    motifs, style = _FAMILIES[family]
    img = _layout(arch, spec.image_size, spec.channels, style)
    patch = motifs()[arch.motif]
    color = _PALETTE[arch.motif]
    color = color[:, None, None] if spec.channels == 3 else np.array([color.mean()])[:, None, None]
    stamp = 0.5 * color * patch[None]
    shifts = rng.integers(-spec.jitter, spec.jitter + 1, size=(len(arch.anchors), 2))
    for (ay, ax), (dy, dx) in zip(arch.anchors, shifts):
        y, x = ay + dy, ax + dx
        img[:, y : y + MOTIF_SIZE, x : x + MOTIF_SIZE] += stamp
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _render_split(archetypes, names, family, spec, per_class, role, rng) -> LabeledDataset:
    order = np.argsort(names)  # label indices follow sorted class names
    label_space = tuple(names[i] for i in order)
    images, labels = [], []
    for label, i in enumerate(order):
        for _ in range(per_class):
            images.append(_render(archetypes[i], family, spec, rng))
            labels.append(label)
    return LabeledDataset(np.stack(images), np.array(labels, dtype=np.int64), label_space, role)


def synth_generate(spec: SynthSpec) -> DatasetPair:
    """Deterministic synthetic DatasetPair; a pure function of ``spec``.

    Each class pairs a colored local motif, stamped near fixed anchors with
    per-sample jitter, with a global intensity ramp (direction and level).
    Base and novel archetypes are drawn without replacement from one pool of
    (motif, direction, level) combinations. A family fixes the motif shapes
    and the layout style, so a novel family different from the base family
    gives a domain shift.
    """
    rng = np.random.default_rng(spec.seed)
    base_arch, novel_arch = _draw_archetypes(rng, (spec.n_base_classes, spec.n_novel_classes), spec)
    base_names = [a.name(spec.base_family) for a in base_arch]
    novel_names = [a.name(spec.novel_family) for a in novel_arch]
    return DatasetPair(
        base_train=_render_split(base_arch, base_names, spec.base_family, spec, spec.samples_per_class, "base", rng),
        base_test=_render_split(base_arch, base_names, spec.base_family, spec, spec.test_per_class, "base", rng),
        novel_train_pool=_render_split(novel_arch, novel_names, spec.novel_family, spec, spec.samples_per_class, "novel", rng),
        novel_test=_render_split(novel_arch, novel_names, spec.novel_family, spec, spec.test_per_class, "novel", rng),
    )


# ---------------------------------------------------------------------------
# on-disk layout: root/{base,novel}/{train,test}/<class>/*.{pgm,ppm}

_SPLITS = {
    "base_train": ("base", "train"),
    "base_test": ("base", "test"),
    "novel_train_pool": ("novel", "train"),
    "novel_test": ("novel", "test"),
}


def _load_split(root: Path, role: str, split: str) -> LabeledDataset:
    split_dir = root / role / split
    if not split_dir.is_dir():
        raise DataError(f"missing split directory {split_dir}")
    classes = sorted(p.name for p in split_dir.iterdir() if p.is_dir())
    images, labels = [], []
    for label, name in enumerate(classes):
        files = sorted(f for f in (split_dir / name).iterdir() if f.suffix.lower() in (".pgm", ".ppm"))
        for f in files:
            try:
                images.append(read_netpbm(f))
            except NetpbmError as exc:
                raise DataError(f"{f}: {exc}") from exc
            labels.append(label)
    if not images:
        raise DataError(f"no images found under {split_dir}")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DataError(f"inconsistent image shapes under {split_dir}: {sorted(shapes)}")
    return LabeledDataset(np.stack(images), np.array(labels, dtype=np.int64), tuple(classes), role)


def load_image_dir(root) -> DatasetPair:
    root = Path(root)
    splits = {key: _load_split(root, role, split) for key, (role, split) in _SPLITS.items()}
    return DatasetPair(**splits)


def save_image_dir(pair: DatasetPair, root) -> None:
    root = Path(root)
    for key, (role, split) in _SPLITS.items():
        ds: LabeledDataset = getattr(pair, key)
        ext = "pgm" if ds.images.shape[1] == 1 else "ppm"
        counters = [0] * ds.n_classes
        for image, label in zip(ds.images, ds.labels):
            class_dir = root / role / split / ds.label_space[label]
            os.makedirs(class_dir, exist_ok=True)
            write_netpbm(class_dir / f"{counters[label]:05d}.{ext}", image)
            counters[label] += 1


# ---------------------------------------------------------------------------
# episodes


@dataclass(frozen=True)
class Episode:
    support: np.ndarray  # (n_novel, k) indices into novel_train_pool
    novel_queries: np.ndarray  # indices into novel_test
    base_queries: np.ndarray  # indices into base_test
    seed: int | None = None

    @property
    def shots(self) -> int:
        return self.support.shape[1]


def sample_episode(pair: DatasetPair, k: int, rng: np.random.Generator, seed: int | None = None) -> Episode:
    """Draw ``k`` support samples per novel class without replacement."""
    if k < 1:
        raise ValueError("shot count must be at least 1")
    pool = pair.novel_train_pool
    support = []
    for label in range(pool.n_classes):
        idx = pool.indices_of(label)
        if len(idx) < k:
            raise DataError(
                f"novel class {pool.label_space[label]!r} has {len(idx)} pool samples, fewer than k={k}"
            )
        support.append(rng.choice(idx, size=k, replace=False))
    return Episode(
        support=np.stack(support),
        novel_queries=np.arange(len(pair.novel_test)),
        base_queries=np.arange(len(pair.base_test)),
        seed=seed,
    )


def random_crops(image: np.ndarray, n: int, rng: np.random.Generator, fraction: float = 0.8) -> np.ndarray:
    """``n`` square-ish crops covering ``fraction`` of each side, resized back to full size."""
    c, h, w = image.shape
    ch, cw = max(1, int(round(h * fraction))), max(1, int(round(w * fraction)))
    out = np.empty((n, c, h, w))
    for i in range(n):
        y = int(rng.integers(0, h - ch + 1))
        x = int(rng.integers(0, w - cw + 1))
        crop = image[:, y : y + ch, x : x + cw]
        out[i] = ndimage.zoom(crop, (1, h / ch, w / cw), order=1, grid_mode=True, mode="nearest")
    return out
