"""Synthetic phenology patches, stratified splits, class weights and dataset files."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TRAIN, VAL, TEST, UNASSIGNED = 0, 1, 2, 255
SPLIT_TAGS = {"train": TRAIN, "val": VAL, "test": TEST}

MAGIC = b"CROPSEQ1"

CROP_NAMES = [
    "corn", "meadow", "asparagus", "rape", "hops", "summer oats", "winter spelt", "fallow",
    "winter wheat", "winter barley", "winter rye", "beans", "winter triticale", "summer barley",
    "peas", "potatoes", "soybeans", "sugar beets", "cloud", "water", "snow", "cloud shadow", "other",
]


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    pass


class WeightError(ValueError):
    pass


@dataclass(frozen=True)
class PatchSequence:
    values: np.ndarray  # [T, H, W, C] float32
    label: int


@dataclass(frozen=True)
class ClassCurve:
    """Gaussian-bump time profile: ``amplitude[b] * exp(-(t - peak)^2 / (2 width^2)) + base[b]``."""

    peak: float
    width: float
    amplitude: tuple[float, ...]
    base: tuple[float, ...]

    def profile(self, T: int) -> np.ndarray:
        t = np.arange(T, dtype=np.float64)[:, None]
        bump = np.exp(-((t - self.peak) ** 2) / (2 * self.width ** 2))
        return np.asarray(self.amplitude)[None, :] * bump + np.asarray(self.base)[None, :]


@dataclass
class SyntheticConfig:
    num_samples: int = 9200
    num_classes: int = 23
    seed: int = 0
    noise_std: float = 0.05
    T: int = 26
    patch_h: int = 3
    patch_w: int = 3
    bands: int = 6
    curves: list[ClassCurve] | None = None


def default_curves(K: int, T: int, bands: int, seed: int) -> list[ClassCurve]:
    """Evenly spaced peaks; widths cycle through three values; per-band amplitudes random."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0FFEE]))
    widths = (1.5, 2.5, 3.5)
    curves = []
    for k in range(K):
        peak = (k + 0.5) * T / K
        amp = rng.uniform(0.2, 0.6, bands)
        base = rng.uniform(0.05, 0.3, bands)
        curves.append(ClassCurve(float(peak), widths[k % 3], tuple(amp), tuple(base)))
    return curves


def class_names(K: int) -> list[str]:
    if K <= len(CROP_NAMES):
        return CROP_NAMES[:K]
    return CROP_NAMES + [f"class_{k}" for k in range(len(CROP_NAMES), K)]


@dataclass
class Dataset:
    values: np.ndarray  # [N, T, H, W, C] float32
    labels: np.ndarray  # [N] int64
    class_names: list[str]
    splits: np.ndarray = field(default=None)  # [N] uint8 tags

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.splits is None:
            self.splits = np.full(len(self.labels), UNASSIGNED, dtype=np.uint8)
        self.splits = np.asarray(self.splits, dtype=np.uint8)
        if self.values.ndim != 5 or len(self.values) != len(self.labels) or len(self.splits) != len(self.labels):
            raise ValueError(f"inconsistent dataset arrays: {self.values.shape}, {self.labels.shape}, {self.splits.shape}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def sample_shape(self) -> tuple[int, int, int, int]:
        return tuple(self.values.shape[1:])

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> PatchSequence:
        return PatchSequence(self.values[i], int(self.labels[i]))

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == SPLIT_TAGS[split])

    def subset(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.indices(split)
        return self.values[idx], self.labels[idx]

    def class_counts(self, split: str | None = None) -> np.ndarray:
        labels = self.labels if split is None else self.labels[self.indices(split)]
        return np.bincount(labels, minlength=self.num_classes)


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    K = cfg.num_classes
    if K < 1:
        raise ConfigError("num_classes must be >= 1")
    if cfg.num_samples < K:
        raise ConfigError(f"num_samples ({cfg.num_samples}) must be >= num_classes ({K})")
    curves = cfg.curves or default_curves(K, cfg.T, cfg.bands, cfg.seed)
    if len(curves) != K:
        raise ConfigError(f"{len(curves)} curves supplied for {K} classes")
    if len({(c.peak, c.width) for c in curves}) != K:
        raise ConfigError("classes must have distinct (peak, width) pairs")

    labels = np.arange(cfg.num_samples) % K
    profiles = np.stack([c.profile(cfg.T) for c in curves])  # K, T, bands
    rng = np.random.default_rng(cfg.seed)
    shape = (cfg.num_samples, cfg.T, cfg.patch_h, cfg.patch_w, cfg.bands)
    values = np.broadcast_to(profiles[labels][:, :, None, None, :], shape)
    if cfg.noise_std > 0:
        values = values + rng.normal(0.0, cfg.noise_std, shape)
    values = np.clip(values, 0.0, 1.0).astype(np.float32)
    return Dataset(values, labels, class_names(K))


def _largest_remainder(total: int, ratios) -> np.ndarray:
    exact = total * np.asarray(ratios, dtype=np.float64)
    out = np.floor(exact).astype(np.int64)
    short = total - out.sum()
    order = np.argsort(-(exact - out), kind="stable")
    out[order[:short]] += 1
    return out


def split(ds: Dataset, ratios=(0.75, 0.05, 0.20), seed: int = 0) -> Dataset:
    """Stratified train/val/test tagging.

    Each class gets ``floor(n_k * r)`` samples per split; the leftover
    samples go one per split so that per-class counts stay within one sample
    of ``n_k * r`` and the overall split sizes match the largest-remainder
    rounding of ``N * r``.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or abs(ratios.sum() - 1.0) > 1e-6 or (ratios < 0).any():
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios.tolist()}")
    counts = ds.class_counts()
    base = np.floor(counts[:, None] * ratios[None, :] + 1e-9).astype(np.int64)
    frac = counts[:, None] * ratios[None, :] - base
    need = _largest_remainder(len(ds), ratios) - base.sum(axis=0)
    alloc = base.copy()
    left = counts - base.sum(axis=1)
    for k in sorted(range(len(counts)), key=lambda k: (-left[k], k)):
        for _ in range(left[k]):
            # split with the largest outstanding demand that this class has not topped up yet
            open_ = [s for s in range(3) if alloc[k, s] == base[k, s]]
            s = max(open_, key=lambda s: (need[s], frac[k, s], -s))
            alloc[k, s] += 1
            need[s] -= 1

    rng = np.random.default_rng(seed)
    tags = np.full(len(ds), UNASSIGNED, dtype=np.uint8)
    for k in range(len(counts)):
        idx = np.flatnonzero(ds.labels == k)
        idx = idx[rng.permutation(len(idx))]
        a, b = alloc[k, 0], alloc[k, 0] + alloc[k, 1]
        tags[idx[:a]] = TRAIN
        tags[idx[a:b]] = VAL
        tags[idx[b:]] = TEST
    return Dataset(ds.values, ds.labels, list(ds.class_names), tags)


def compute_class_weights(ds: Dataset, split_name: str = "train") -> np.ndarray:
    """Inverse-frequency weights ``N / (K n_k)`` over the training split.

    Normalised so that ``sum_k n_k w_k == N``.
    """
    counts = ds.class_counts(split_name).astype(np.float64)
    N, K = counts.sum(), len(counts)
    if N == 0:
        raise WeightError(f"{split_name} split is empty")
    missing = [ds.class_names[k] for k in np.flatnonzero(counts == 0)]
    if missing:
        raise WeightError(f"classes absent from {split_name} split: {', '.join(missing)}")
    w = N / (K * counts)
    return w * (N / (counts * w).sum())


def nearest_centroid_accuracy(ds: Dataset, train: str = "train", test: str = "test") -> float:
    """Accuracy of a nearest-centroid classifier on spatially averaged time profiles."""
    xtr, ytr = ds.subset(train)
    xte, yte = ds.subset(test)
    feats = lambda x: x.astype(np.float64).mean(axis=(2, 3)).reshape(len(x), -1)  # noqa: E731
    ftr, fte = feats(xtr), feats(xte)
    classes = np.unique(ytr)
    cent = np.stack([ftr[ytr == k].mean(axis=0) for k in classes])
    d = ((fte[:, None, :] - cent[None, :, :]) ** 2).sum(axis=2)
    return float((classes[d.argmin(axis=1)] == yte).mean())


# ----------------------------------------------------------------- file I/O


def dumps(ds: Dataset) -> bytes:
    buf = io.BytesIO()
    T, H, W, C = ds.sample_shape
    buf.write(MAGIC)
    buf.write(struct.pack("<IHHHHH", len(ds), ds.num_classes, T, H, W, C))
    for name in ds.class_names:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
    vals = ds.values.astype("<f4", copy=False)
    for i in range(len(ds)):
        buf.write(struct.pack("<BH", ds.splits[i], ds.labels[i]))
        buf.write(vals[i].tobytes(order="C"))
    return buf.getvalue()


def loads(data: bytes) -> Dataset:
    head = struct.calcsize("<IHHHHH")
    if len(data) < len(MAGIC) + head or data[:len(MAGIC)] != MAGIC:
        raise FormatError("not a dataset file (bad magic or short header)")
    pos = len(MAGIC)
    n, K, T, H, W, C = struct.unpack_from("<IHHHHH", data, pos)
    pos += head
    names = []
    for _ in range(K):
        if pos + 2 > len(data):
            raise FormatError("truncated class-name table")
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + ln > len(data):
            raise FormatError("truncated class-name table")
        names.append(data[pos:pos + ln].decode("utf-8"))
        pos += ln
    rec = 3 + T * H * W * C * 4
    body = len(data) - pos
    if body != n * rec:
        raise FormatError(f"header declares {n} samples but the file holds {body / rec:g} records")
    recs = np.frombuffer(data, dtype=np.uint8, offset=pos).reshape(n, rec)
    splits = recs[:, 0].copy()
    labels = recs[:, 1:3].copy().view("<u2").reshape(n).astype(np.int64)
    values = recs[:, 3:].copy().view("<f4").reshape(n, T, H, W, C).astype(np.float32)
    if n and labels.max() >= K:
        raise FormatError("label out of range for class table")
    return Dataset(values, labels, names, splits)


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(ds))
    tmp.replace(path)


def load_dataset(path) -> Dataset:
    return loads(Path(path).read_bytes())
