"""Paired RAW/RGB samples: Bayer packing, PNG I/O, manifests and batching.

On-disk layout::

    <root>/<split>/raw/<id>.png   single-channel 8- or 16-bit Bayer mosaic
    <root>/<split>/rgb/<id>.png   8-bit RGB target at the mosaic's extent
    <root>/<split>/manifest.txt   optional; one id per line, '#' comments
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .tensor import Tensor

PATTERNS = ("RGGB", "BGGR", "GRBG", "GBRG")
SPLITS = ("train", "val", "test")


class DataError(ValueError):
    pass


def pack_bayer(mosaic: np.ndarray, pattern: str = "RGGB") -> np.ndarray:
    """Fold a ``(1,) 2H x 2W`` mosaic into ``4 x H x W``.

    Channels are positional: top-left, top-right, bottom-left, bottom-right
    of each 2x2 cell, whatever the colour ``pattern`` (kept as metadata only).
    """
    if pattern not in PATTERNS:
        raise DataError(f"unknown Bayer pattern {pattern!r}; expected one of {PATTERNS}")
    m = np.asarray(mosaic)
    if m.ndim == 3:
        if m.shape[0] != 1:
            raise DataError(f"mosaic must have one channel, got shape {m.shape}")
        m = m[0]
    h2, w2 = m.shape
    if h2 % 2 or w2 % 2:
        raise DataError(f"mosaic extents {h2}x{w2} must be even")
    return m.reshape(h2 // 2, 2, w2 // 2, 2).transpose(1, 3, 0, 2).reshape(4, h2 // 2, w2 // 2)


def unpack_bayer(packed: np.ndarray) -> np.ndarray:
    """Inverse of :func:`pack_bayer`, returning a ``1 x 2H x 2W`` mosaic."""
    p = np.asarray(packed)
    if p.ndim != 3 or p.shape[0] != 4:
        raise DataError(f"packed Bayer tensor must be 4 x H x W, got shape {p.shape}")
    _, h, w = p.shape
    return p.reshape(2, 2, h, w).transpose(2, 0, 3, 1).reshape(1, 2 * h, 2 * w)


# ---------------------------------------------------------------- PNG I/O
def read_png(path: str | Path) -> tuple[np.ndarray, int]:
    """Return ``(array, bit depth)``; ``array`` is H x W or H x W x 3."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing image file: {path}")
    try:
        with Image.open(path) as im:
            mode = im.mode
            arr = np.array(im)
    except Exception as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        return arr.astype(np.uint16), 16
    if mode in ("L", "RGB"):
        return arr, 8
    raise DataError(f"unsupported PNG mode {mode!r} in {path}")


def read_mosaic(path: str | Path) -> np.ndarray:
    """Single-channel mosaic scaled to [0, 1] by its bit depth, shape ``1 x H x W``."""
    arr, depth = read_png(path)
    if arr.ndim != 2:
        raise DataError(f"RAW mosaic {path} must be single-channel, got shape {arr.shape}")
    return (arr.astype(np.float64) / (2**depth - 1))[None]


def read_rgb(path: str | Path) -> np.ndarray:
    """8-bit RGB image scaled to [0, 1], shape ``3 x H x W``."""
    arr, depth = read_png(path)
    if arr.ndim != 3 or arr.shape[2] != 3 or depth != 8:
        raise DataError(f"target {path} must be 8-bit RGB, got shape {arr.shape} at {depth} bits")
    return arr.astype(np.float64).transpose(2, 0, 1) / 255.0


def to_bytes(rgb: np.ndarray) -> np.ndarray:
    """Scale [0, 1] to 0..255, rounding half away from zero."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.size and (not np.all(np.isfinite(rgb)) or rgb.min() < 0.0 or rgb.max() > 1.0):
        raise DataError("RGB values must lie in [0, 1]")
    return np.floor(rgb * 255.0 + 0.5).astype(np.uint8)


def write_rgb(path: str | Path, rgb: np.ndarray) -> None:
    """Write a ``3 x H x W`` [0, 1] array as an 8-bit RGB PNG."""
    rgb = np.asarray(rgb.data if isinstance(rgb, Tensor) else rgb)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise DataError(f"write_rgb expects 3 x H x W, got shape {rgb.shape}")
    path = Path(path)
    try:
        Image.fromarray(np.ascontiguousarray(to_bytes(rgb).transpose(1, 2, 0))).save(path)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def write_mosaic(path: str | Path, mosaic: np.ndarray, bits: int = 16) -> None:
    """Write a [0, 1] mosaic (``H x W`` or ``1 x H x W``) as a grayscale PNG."""
    m = np.asarray(mosaic, dtype=np.float64)
    m = m[0] if m.ndim == 3 else m
    if m.min() < 0 or m.max() > 1:
        raise DataError("mosaic values must lie in [0, 1]")
    top = 2**bits - 1
    q = np.floor(m * top + 0.5)
    if bits == 16:
        Image.fromarray(q.astype(np.uint16)).save(path)
    elif bits == 8:
        Image.fromarray(q.astype(np.uint8)).save(path)
    else:
        raise DataError(f"bit depth must be 8 or 16, got {bits}")


# ---------------------------------------------------------------- datasets
@dataclass
class RawSample:
    raw_packed: np.ndarray
    target_rgb: np.ndarray
    id: str

    def __post_init__(self):
        c, h, w = self.raw_packed.shape
        if c != 4 or self.target_rgb.shape != (3, 2 * h, 2 * w):
            raise DataError(
                f"sample {self.id}: packed RAW {self.raw_packed.shape} does not pair with "
                f"target {self.target_rgb.shape} (expected 3 x {2 * h} x {2 * w})"
            )
        for name, arr in (("raw", self.raw_packed), ("rgb", self.target_rgb)):
            if arr.min() < 0.0 or arr.max() > 1.0:
                raise DataError(f"sample {self.id}: {name} values outside [0, 1]")


def read_id_list(path: str | Path) -> list[str]:
    ids = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            ids.append(line)
    return ids


@dataclass
class DatasetManifest:
    root: Path
    split: str = "train"
    ids: list = field(default_factory=list)
    pattern: str = "RGGB"
    # optional black level and white level applied to raw values after bit-depth scaling
    black_level: float = 0.0
    white_level: float = 1.0

    @classmethod
    def load(cls, root: str | Path, split: str = "train", **kwargs) -> "DatasetManifest":
        """Read ``manifest.txt`` if present, else pair up the files on disk."""
        root = Path(root)
        base = root / split
        listing = base / "manifest.txt"
        if listing.is_file():
            ids = read_id_list(listing)
        else:
            if not (base / "raw").is_dir():
                raise DataError(f"no raw/ directory under {base}")
            ids = sorted(p.stem for p in (base / "raw").glob("*.png"))
        manifest = cls(root, split, ids, **kwargs)
        manifest.validate()
        return manifest

    def raw_path(self, sample_id: str) -> Path:
        return self.root / self.split / "raw" / f"{sample_id}.png"

    def rgb_path(self, sample_id: str) -> Path:
        return self.root / self.split / "rgb" / f"{sample_id}.png"

    def validate(self) -> None:
        if self.split not in SPLITS:
            raise DataError(f"split must be one of {SPLITS}, got {self.split!r}")
        if len(set(self.ids)) != len(self.ids):
            raise DataError(f"duplicate ids in {self.split} manifest")
        for sid in self.ids:
            for p in (self.raw_path(sid), self.rgb_path(sid)):
                if not p.is_file():
                    raise DataError(f"manifest id {sid!r} has no file {p}")


def check_disjoint(*manifests: DatasetManifest) -> None:
    seen: dict[str, str] = {}
    for m in manifests:
        for sid in m.ids:
            if sid in seen and seen[sid] != m.split:
                raise DataError(f"id {sid!r} appears in both {seen[sid]} and {m.split}")
            seen[sid] = m.split


def load_sample(manifest: DatasetManifest, sample_id: str) -> RawSample:
    mosaic = read_mosaic(manifest.raw_path(sample_id))
    rgb = read_rgb(manifest.rgb_path(sample_id))
    if mosaic.shape[1:] != rgb.shape[1:]:
        raise DataError(
            f"sample {sample_id}: raw mosaic {mosaic.shape[1:]} and rgb {rgb.shape[1:]} extents differ"
        )
    span = manifest.white_level - manifest.black_level
    if manifest.black_level or manifest.white_level != 1.0:
        mosaic = (mosaic - manifest.black_level) / span
    return RawSample(pack_bayer(mosaic, manifest.pattern), rgb, sample_id)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Deterministic permutation of ``n`` samples for one epoch."""
    return np.random.default_rng([seed, epoch]).permutation(n)


def iterate_batches(
    samples: list[RawSample], batch: int, seed: int, epoch: int = 0, dtype=np.float32
) -> Iterator[tuple[list[str], np.ndarray, np.ndarray]]:
    """Yield ``(ids, B x 4 x H x W, B x 3 x 2H x 2W)``; the last batch may be short."""
    if batch < 1:
        raise ValueError(f"batch size must be >= 1, got {batch}")
    order = epoch_order(len(samples), seed, epoch)
    for start in range(0, len(order), batch):
        chunk = [samples[i] for i in order[start : start + batch]]
        x = np.stack([s.raw_packed for s in chunk]).astype(dtype)
        y = np.stack([s.target_rgb for s in chunk]).astype(dtype)
        yield [s.id for s in chunk], x, y


class SampleCache:
    """Loads every manifest sample once, keeping manifest order."""

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        self.samples = [load_sample(manifest, sid) for sid in manifest.ids]

    def __len__(self) -> int:
        return len(self.samples)

    def batches(self, batch: int, seed: int, epoch: int = 0, dtype=np.float32):
        return iterate_batches(self.samples, batch, seed, epoch, dtype)


# ---------------------------------------------------------------- synthetic
def synthetic_scene(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth random RGB image in [0, 1], shape ``3 x size x size``."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.empty((3, size, size))
    for c in range(3):
        acc = rng.uniform(0.2, 0.6) + rng.uniform(-0.3, 0.3) * xx + rng.uniform(-0.3, 0.3) * yy
        for _ in range(3):
            fx, fy = rng.uniform(0.5, 3.0, 2)
            phase = rng.uniform(0, 2 * np.pi)
            acc = acc + rng.uniform(0.05, 0.15) * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
        img[c] = acc
    return np.clip(img, 0.0, 1.0)


def mosaic_from_rgb(rgb: np.ndarray, gains=(0.5, 1.0, 0.7), gamma: float = 2.2) -> np.ndarray:
    """Toy inverse ISP: undo gamma, apply per-channel sensor gains, sample RGGB."""
    linear = np.clip(rgb, 0, 1) ** gamma * np.asarray(gains)[:, None, None]
    h, w = rgb.shape[1:]
    m = np.empty((h, w))
    m[0::2, 0::2] = linear[0, 0::2, 0::2]
    m[0::2, 1::2] = linear[1, 0::2, 1::2]
    m[1::2, 0::2] = linear[1, 1::2, 0::2]
    m[1::2, 1::2] = linear[2, 1::2, 1::2]
    return np.clip(m, 0.0, 1.0)[None]


def make_synthetic_dataset(root: str | Path, count: int, size: int, seed: int = 0, split: str = "train") -> DatasetManifest:
    """Write ``count`` paired ``size x size`` mosaic/RGB PNGs plus a manifest."""
    rng = np.random.default_rng(seed)
    base = Path(root) / split
    (base / "raw").mkdir(parents=True, exist_ok=True)
    (base / "rgb").mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(count):
        sid = f"{split}_{i:04d}"
        rgb = synthetic_scene(rng, size)
        # quantise first so the stored target is exactly what the mosaic came from
        rgb = to_bytes(rgb).astype(np.float64) / 255.0
        write_rgb(base / "rgb" / f"{sid}.png", rgb)
        write_mosaic(base / "raw" / f"{sid}.png", mosaic_from_rgb(rgb))
        ids.append(sid)
    (base / "manifest.txt").write_text("# synthetic pairs\n" + "\n".join(ids) + "\n", encoding="utf-8")
    return DatasetManifest.load(root, split)
