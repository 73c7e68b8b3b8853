"""Seeded synthetic datasets in [0, 1] and the binary dataset file format."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptDatasetError, DatasetLabelError, NotADatasetError, ShapeError

DATASET_MAGIC = b"MMDS"
DATASET_VERSION = 1

# disjoint seed streams for the two splits
_SPLIT_STREAM = {"train": 0, "test": 1}


@dataclass
class DatasetBundle:
    features: np.ndarray  # [N, *input_shape], values in [0, 1]
    labels: np.ndarray  # [N] int
    num_classes: int
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ShapeError("features and labels disagree on the sample count")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def input_shape(self) -> tuple:
        return tuple(self.features.shape[1:])

    @property
    def margin(self) -> float:
        return float(self.meta["margin"])


def _rng(seed: int, split: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), _SPLIT_STREAM[split]])


# -- two moons ----------------------------------------------------------------


def _moon_curves(n_upper: int, n_lower: int):
    t_up = np.linspace(0.0, np.pi, n_upper)
    t_lo = np.linspace(0.0, np.pi, n_lower)
    upper = np.stack([np.cos(t_up), np.sin(t_up)], axis=1)
    lower = np.stack([1.0 - np.cos(t_lo), 0.5 - np.sin(t_lo)], axis=1)
    return upper, lower


def _moons_gap() -> float:
    up, lo = _moon_curves(4001, 4001)
    # nearest lower-moon point for every upper-moon point, in chunks
    best = np.inf
    for chunk in np.array_split(up, 20):
        d = np.sqrt(((chunk[:, None, :] - lo[None, :, :]) ** 2).sum(-1))
        best = min(best, float(d.min()))
    return best


_MOONS_GAP = None


def moons_transform(noise: float):
    """Isotropic map from the raw moon plane into [0, 1]^2: returns (offset, scale)."""
    pad = 3.0 * noise
    lo = np.array([-1.0 - pad, -0.5 - pad])
    hi = np.array([2.0 + pad, 1.0 + pad])
    scale = 1.0 / float((hi - lo).max())
    centre = (lo + hi) / 2.0
    offset = 0.5 - centre * scale
    return offset, scale


def gen_two_moons(n: int, noise: float, seed: int, split: str = "train") -> DatasetBundle:
    """Two interleaved half circles with Gaussian noise, mapped into [0, 1]^2.

    Class 0 is the upper moon (ceil(n/2) points), class 1 the lower one.
    """
    global _MOONS_GAP
    if n < 2:
        raise ShapeError(f"two moons needs n >= 2, got {n}")
    if noise < 0:
        raise ShapeError("noise must be >= 0")
    rng = _rng(seed, split)
    n0, n1 = (n + 1) // 2, n // 2
    t0 = rng.uniform(0.0, np.pi, n0)
    t1 = rng.uniform(0.0, np.pi, n1)
    raw = np.concatenate(
        [
            np.stack([np.cos(t0), np.sin(t0)], axis=1),
            np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1),
        ]
    )
    if noise > 0:
        raw = raw + rng.normal(0.0, noise, size=raw.shape)
    labels = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    order = rng.permutation(n)
    raw, labels = raw[order], labels[order]
    offset, scale = moons_transform(noise)
    features = np.clip(raw * scale + offset, 0.0, 1.0)
    if _MOONS_GAP is None:
        _MOONS_GAP = _moons_gap()
    meta = {
        "name": "two_moons",
        "seed": int(seed),
        "noise": float(noise),
        "margin": _MOONS_GAP * scale,
        "offset_x": float(offset[0]),
        "offset_y": float(offset[1]),
        "scale": scale,
    }
    return DatasetBundle(features, labels, 2, split, meta)


# -- blob grid ------------------------------------------------------------------


def _grid_centres(classes: int, spacing: float) -> np.ndarray:
    cols = int(np.ceil(np.sqrt(classes)))
    idx = np.arange(classes)
    return np.stack([idx % cols, idx // cols], axis=1).astype(np.float64) * spacing


def gen_blob_grid(
    classes: int,
    per_class: int,
    spacing: float,
    noise: float,
    seed: int,
    split: str = "train",
    image: bool = False,
) -> DatasetBundle:
    """Isotropic Gaussian blobs at grid points ``spacing`` apart.

    With ``image=True`` every sample is rendered as a 1x8x8 intensity patch: a
    Gaussian bump placed at the sample's (rescaled) 2-D location.
    """
    if classes < 2 or per_class < 1:
        raise ShapeError(f"blob grid needs classes >= 2 and per_class >= 1, got {classes}, {per_class}")
    if not spacing > 0:
        raise ShapeError("spacing must be > 0")
    if noise < 0:
        raise ShapeError("noise must be >= 0")
    rng = _rng(seed, split)
    centres = _grid_centres(classes, spacing)
    labels = np.repeat(np.arange(classes), per_class)
    raw = centres[labels]
    if noise > 0:
        raw = raw + rng.normal(0.0, noise, size=raw.shape)
    order = rng.permutation(labels.shape[0])
    raw, labels = raw[order], labels[order]
    pad = spacing / 2.0 + 3.0 * noise
    lo = centres.min(axis=0) - pad
    extent = float((centres.max(axis=0) + pad - lo).max())
    scale = 1.0 / extent
    flat = np.clip((raw - lo) * scale, 0.0, 1.0)
    meta = {
        "name": "blob_grid_image" if image else "blob_grid",
        "seed": int(seed),
        "noise": float(noise),
        "margin": float(spacing),
        "scale": scale,
        "offset_x": float(-lo[0] * scale),
        "offset_y": float(-lo[1] * scale),
    }
    if not image:
        return DatasetBundle(flat, labels, classes, split, meta)
    return DatasetBundle(render_patches(flat), labels, classes, split, meta)


def render_patches(points: np.ndarray, size: int = 8, width: float = 0.12) -> np.ndarray:
    """Render [N, 2] points in [0,1]^2 as [N, 1, size, size] Gaussian bumps."""
    grid = (np.arange(size) + 0.5) / size
    dx = grid[None, :] - points[:, 0:1]  # columns
    dy = grid[None, :] - points[:, 1:2]  # rows
    bump = np.exp(-(dy[:, :, None] ** 2 + dx[:, None, :] ** 2) / (2 * width**2))
    return bump[:, None, :, :]


# -- file format -----------------------------------------------------------------


def write_dataset(bundle: DatasetBundle, path) -> None:
    feats = np.ascontiguousarray(bundle.features, dtype="<f8")
    if (bundle.labels < 0).any() or (bundle.labels >= bundle.num_classes).any():
        raise DatasetLabelError("labels outside [0, C)")
    meta_text = "\n".join(f"{k}={_fmt_meta(v)}" for k, v in sorted(bundle.meta.items()))
    meta_text = f"split={bundle.split}\n" + meta_text if meta_text else f"split={bundle.split}"
    raw_meta = meta_text.encode("utf-8")
    parts = [
        DATASET_MAGIC,
        struct.pack("<I", DATASET_VERSION),
        struct.pack("<I", bundle.num_classes),
        struct.pack("<I", len(bundle)),
        struct.pack("<B", feats.ndim - 1),
    ]
    parts += [struct.pack("<I", d) for d in feats.shape[1:]]
    parts += [feats.tobytes(), bundle.labels.astype("<u2").tobytes()]
    parts += [struct.pack("<I", len(raw_meta)), raw_meta]
    Path(path).write_bytes(b"".join(parts))


def _fmt_meta(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def _parse_meta(value: str):
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value


def read_dataset(path) -> DatasetBundle:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != DATASET_MAGIC:
        raise NotADatasetError(f"{path}: not a dataset")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CorruptDatasetError(f"{path}: truncated dataset")
        out = buf[pos : pos + n]
        pos += n
        return out

    version, classes, count = struct.unpack("<III", take(12))
    if version != DATASET_VERSION:
        raise CorruptDatasetError(f"{path}: unsupported version {version}")
    rank = take(1)[0]
    dims = struct.unpack(f"<{rank}I", take(4 * rank))
    n_feat = count * int(np.prod(dims, dtype=np.int64))
    features = np.frombuffer(take(8 * n_feat), dtype="<f8").astype(np.float64).reshape((count, *dims))
    labels = np.frombuffer(take(2 * count), dtype="<u2").astype(np.int64)
    (meta_len,) = struct.unpack("<I", take(4))
    try:
        meta_text = take(meta_len).decode("utf-8")
    except UnicodeDecodeError:
        raise CorruptDatasetError(f"{path}: metadata is not UTF-8") from None
    if pos != len(buf):
        raise CorruptDatasetError(f"{path}: trailing bytes")
    if (labels >= classes).any():
        raise DatasetLabelError(f"{path}: label {int(labels.max())} outside [0, {classes})")
    meta = {}
    for line in meta_text.splitlines():
        key, _, value = line.partition("=")
        meta[key] = _parse_meta(value)
    split = str(meta.pop("split", "train"))
    if "name" in meta:
        meta["name"] = str(meta["name"])
    return DatasetBundle(features, labels, classes, split, meta)
