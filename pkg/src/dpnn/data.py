"""Volumes, synthetic phantoms, manifests, fold splits and map export.

Binary volume layout (all little-endian)::

    b"DPNV" | version u32 | H u32 | W u32 | D u32 | H*W*D float32

with voxel index ``(z * H + y) * W + x``, i.e. a C-ordered ``[D, H, W]``
array. Projection maps reuse the layout with ``D = 1``.

Randomness comes from numpy's PCG64 generator seeded with the given
64-bit seed, so a seed reproduces the same volumes on any machine.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    ContractError,
    DegenerateInputError,
    DimOverflowError,
    TruncatedFileError,
)

CLASSES = ("MSA", "PSP", "PD")
CLASS_INDEX = {name: i for i, name in enumerate(CLASSES)}

VOLUME_MAGIC = b"DPNV"
VOLUME_VERSION = 1
_HEADER = struct.Struct("<4s4I")
MAX_VOXELS = 2**31 - 1


@dataclass
class Volume:
    voxels: np.ndarray  # [D, H, W]
    id: str = ""
    label: int | None = None

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float64)
        if self.voxels.ndim != 3:
            raise ContractError(f"volume must be 3-d, got shape {self.voxels.shape}")

    @property
    def dims(self) -> tuple[int, int, int]:
        d, h, w = self.voxels.shape
        return h, w, d


def global_mean_normalize(v: Volume) -> Volume:
    """Divide by the mean over nonzero voxels (a stand-in for a brain mask)."""
    nz = v.voxels[v.voxels != 0]
    if nz.size == 0 or not nz.mean() > 0:
        raise DegenerateInputError(f"volume {v.id!r} has no positive nonzero mean")
    return Volume(v.voxels / nz.mean(), id=v.id, label=v.label)


# -- binary I/O -----------------------------------------------------------------


def encode_volume(voxels: np.ndarray) -> bytes:
    voxels = np.asarray(voxels)
    if voxels.ndim != 3:
        raise ContractError("expected a [D, H, W] array")
    if not np.all(np.isfinite(voxels)):
        raise ContractError("cannot save non-finite voxels")
    d, h, w = voxels.shape
    return _HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, h, w, d) + voxels.astype("<f4").tobytes()


def decode_volume(buf: bytes) -> np.ndarray:
    if len(buf) < 4 or buf[:4] != VOLUME_MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {VOLUME_MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedFileError("volume header truncated")
    _, version, h, w, d = _HEADER.unpack_from(buf)
    if version != VOLUME_VERSION:
        raise BadMagicError(f"unsupported volume version {version}")
    count = h * w * d
    if count == 0 or count > MAX_VOXELS:
        raise DimOverflowError(f"dims {h}x{w}x{d} out of range")
    need = _HEADER.size + 4 * count
    if len(buf) < need:
        raise TruncatedFileError(f"payload has {len(buf) - _HEADER.size} bytes, need {4 * count}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=_HEADER.size).reshape(d, h, w).astype(np.float64)


def save_volume(v: Volume, path) -> None:
    Path(path).write_bytes(encode_volume(v.voxels))


def load_volume(path, id: str | None = None, label: int | None = None) -> Volume:
    path = Path(path)
    return Volume(decode_volume(path.read_bytes()), id=id if id is not None else path.stem, label=label)


def save_map(m: np.ndarray, path) -> None:
    m = np.asarray(m)
    save_volume(Volume(m.reshape(1, *m.shape[-2:])), path)


def load_map(path) -> np.ndarray:
    return decode_volume(Path(path).read_bytes())[0]


def save_map_pgm(m: np.ndarray, path, sidecar: bool = True) -> None:
    """Write an 8-bit binary PGM (round-half-up of 255 * v) and a float32 sidecar."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ContractError("projection map must be 2-d")
    if not np.all((m >= 0) & (m <= 1)):
        raise ContractError("projection map values must lie in [0, 1]")
    h, w = m.shape
    pixels = np.floor(255.0 * m + 0.5).astype(np.uint8)
    path = Path(path)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())
    if sidecar:
        save_map(m, path.with_suffix(".map"))


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise BadMagicError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w) if maxval < 256 else None


# -- manifests --------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    path: str
    label: int | None = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ContractError("manifest ids must be unique")

    @property
    def labels(self) -> list[int | None]:
        return [e.label for e in self.entries]

    def labeled(self) -> "DatasetManifest":
        return DatasetManifest([e for e in self.entries if e.label is not None], self.seed)


def write_manifest(manifest: DatasetManifest, path) -> None:
    lines = [f"# seed\t{manifest.seed}"]
    for e in manifest.entries:
        lines.append(f"{e.id}\t{e.path}\t{'' if e.label is None else CLASSES[e.label]}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    entries, seed = [], 0
    for raw in path.read_text().splitlines():
        if not raw.strip():
            continue
        if raw.startswith("#"):
            parts = raw[1:].split()
            if len(parts) == 2 and parts[0] == "seed":
                seed = int(parts[1])
            continue
        cols = raw.split("\t")
        if len(cols) < 2:
            raise ContractError(f"malformed manifest line: {raw!r}")
        label = cols[2].strip() if len(cols) > 2 else ""
        if label and label not in CLASS_INDEX:
            raise ContractError(f"unknown class label {label!r}")
        p = Path(cols[1])
        if not p.is_absolute():
            p = path.parent / p
        entries.append(ManifestEntry(cols[0], str(p), CLASS_INDEX[label] if label else None))
    return DatasetManifest(entries, seed)


def load_manifest_volumes(manifest: DatasetManifest, normalize: bool = True) -> list[Volume]:
    vols = []
    for e in manifest.entries:
        v = load_volume(e.path, id=e.id, label=e.label)
        vols.append(global_mean_normalize(v) if normalize else v)
    return vols


# -- synthetic phantoms -------------------------------------------------------------


@dataclass(frozen=True)
class PhantomConfig:
    """Three-class Gaussian-blob phantoms on an ellipsoidal background.

    Region centers are fractions of (z, y, x) extents, radii are in voxels
    (Gaussian sigma). ``multipliers`` gives (striatum, cerebellum) activity
    per class.
    """

    dims: tuple[int, int, int] = (64, 64, 48)  # H, W, D
    striatum_centers: tuple[tuple[float, float, float], ...] = ((0.55, 0.45, 0.36), (0.55, 0.45, 0.64))
    striatum_radius: tuple[float, float, float] = (3.0, 4.0, 3.0)
    cerebellum_center: tuple[float, float, float] = (0.28, 0.74, 0.5)
    cerebellum_radius: tuple[float, float, float] = (4.0, 5.0, 9.0)
    multipliers: dict = field(
        default_factory=lambda: {"MSA": (0.3, 0.3), "PSP": (0.6, 1.6), "PD": (1.8, 1.6)}
    )
    amplitude: float = 2.0
    jitter: float = 0.1
    shift: float = 1.5
    noise_sigma: float = 0.05
    seed: int = 0

    def validate(self) -> None:
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ConfigError(f"phantom.dims must be three positive ints, got {self.dims}")
        if self.noise_sigma < 0:
            raise ConfigError("phantom.noise_sigma must be >= 0")
        if not 0 <= self.jitter < 1:
            raise ConfigError("phantom.jitter must lie in [0, 1)")
        if self.shift < 0:
            raise ConfigError("phantom.shift must be >= 0")
        if set(self.multipliers) != set(CLASSES):
            raise ConfigError(f"phantom.multipliers needs exactly {CLASSES}")
        if any(m < 0 for pair in self.multipliers.values() for m in pair):
            raise ConfigError("phantom.multipliers must be >= 0")
        for c in (*self.striatum_centers, self.cerebellum_center):
            if len(c) != 3 or not all(0 < f < 1 for f in c):
                raise ConfigError(f"phantom region center {c} lies outside the volume")
        for r in (self.striatum_radius, self.cerebellum_radius):
            if len(r) != 3 or min(r) <= 0:
                raise ConfigError("phantom region radii must be positive")


def _grid(dims):
    h, w, d = dims
    return np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")


def _blob(grid, center, radius):
    z, y, x = grid
    return np.exp(-0.5 * (((z - center[0]) / radius[0]) ** 2 + ((y - center[1]) / radius[1]) ** 2 + ((x - center[2]) / radius[2]) ** 2))


def phantom_background(cfg: PhantomConfig, grid=None) -> np.ndarray:
    h, w, d = cfg.dims
    z, y, x = grid if grid is not None else _grid(cfg.dims)
    r = np.sqrt(((z - (d - 1) / 2) / (0.44 * d)) ** 2 + ((y - (h - 1) / 2) / (0.44 * h)) ** 2 + ((x - (w - 1) / 2) / (0.40 * w)) ** 2)
    return 1.0 / (1.0 + np.exp((r - 1.0) / 0.06))


def region_centers(cfg: PhantomConfig) -> tuple[list[tuple[float, ...]], tuple[float, ...]]:
    h, w, d = cfg.dims
    scale = np.array([d - 1, h - 1, w - 1], dtype=np.float64)
    striatum = [tuple(np.array(c) * scale) for c in cfg.striatum_centers]
    return striatum, tuple(np.array(cfg.cerebellum_center) * scale)


def region_mask(cfg: PhantomConfig, region: str) -> np.ndarray:
    """Voxels within one sigma of a region's blob center(s)."""
    grid = _grid(cfg.dims)
    striatum, cerebellum = region_centers(cfg)
    if region == "striatum":
        return np.logical_or.reduce([_blob(grid, c, cfg.striatum_radius) > np.exp(-0.5) for c in striatum])
    if region == "cerebellum":
        return _blob(grid, cerebellum, cfg.cerebellum_radius) > np.exp(-0.5)
    raise ConfigError(f"unknown region {region!r}")


def synth_phantoms(cfg: PhantomConfig, n_per_class: int) -> list[Volume]:
    """``n_per_class`` volumes of each class, ordered MSA, PSP, PD per round.

    PD has high striatal and cerebellar activity, MSA low in both, PSP
    reduced striatum with preserved cerebellum. Each subject draws its own
    activity jitter, region offsets and global gain before additive noise.
    """
    cfg.validate()
    if n_per_class < 1:
        raise ContractError("n_per_class must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    grid = _grid(cfg.dims)
    background = phantom_background(cfg, grid)
    striatum, cerebellum = region_centers(cfg)
    vols = []
    for i in range(n_per_class):
        for label, name in enumerate(CLASSES):
            m_str, m_cer = cfg.multipliers[name]
            j = 1.0 + cfg.jitter * rng.uniform(-1, 1, size=2)
            offset = cfg.shift * rng.uniform(-1, 1, size=3)
            v = background.copy()
            for c in striatum:
                v += cfg.amplitude * m_str * j[0] * _blob(grid, np.add(c, offset), cfg.striatum_radius)
            v += cfg.amplitude * m_cer * j[1] * _blob(grid, np.add(cerebellum, offset), cfg.cerebellum_radius)
            v *= rng.uniform(0.8, 1.2)
            if cfg.noise_sigma > 0:
                v += rng.normal(0.0, cfg.noise_sigma, size=v.shape)
            np.clip(v, 0.0, None, out=v)
            vols.append(Volume(v, id=f"{name.lower()}_{i:04d}", label=label))
    return vols


# -- stratified folds ----------------------------------------------------------------


@dataclass
class FoldSplit:
    folds: list[list[int]]

    @property
    def k(self) -> int:
        return len(self.folds)

    def train_test(self, i: int) -> tuple[list[int], list[int]]:
        test = self.folds[i]
        train = sorted(j for f, fold in enumerate(self.folds) if f != i for j in fold)
        return train, sorted(test)


def stratified_kfold(labels: Sequence[int | None] | DatasetManifest, k: int, seed: int) -> FoldSplit:
    """Shuffle each class with ``seed`` and deal its members round-robin over ``k`` folds.

    The dealing position carries over from one class to the next, so fold
    totals stay balanced as well. Entries with no label are left out.
    """
    if isinstance(labels, DatasetManifest):
        labels = labels.labels
    by_class: dict[int, list[int]] = {}
    for i, y in enumerate(labels):
        if y is not None:
            by_class.setdefault(int(y), []).append(i)
    if not by_class:
        raise ContractError("no labeled entries to split")
    smallest = min(len(v) for v in by_class.values())
    if not 2 <= k <= smallest:
        raise ContractError(f"k must lie in [2, {smallest}], got {k}")
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    pos = 0
    for cls in sorted(by_class):
        members = np.array(by_class[cls])
        for idx in members[rng.permutation(len(members))]:
            folds[pos % k].append(int(idx))
            pos += 1
    return FoldSplit([sorted(f) for f in folds])


def stratified_holdout(labels: Sequence[int], fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Split positions into (train, val) with ``round(fraction * n_c)`` of each class held out."""
    if not 0 < fraction < 1:
        raise ContractError("val_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train, val = [], []
    labels = list(labels)
    for cls in sorted(set(labels)):
        members = np.array([i for i, y in enumerate(labels) if y == cls])
        members = members[rng.permutation(len(members))]
        n_val = int(round(fraction * len(members)))
        val.extend(int(i) for i in members[:n_val])
        train.extend(int(i) for i in members[n_val:])
    return sorted(train), sorted(val)


def stack_volumes(vols: Iterable[Volume]) -> np.ndarray:
    return np.stack([v.voxels for v in vols])
