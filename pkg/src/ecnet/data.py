"""Rain-pair synthesis, ground-truth masks, image IO and dataset indexing.

Images are H x W x 3 float32 arrays in [0, 1]; the rain mask is H x W x 1.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

DEFAULT_TAU = 0.05
RAW_MAGIC = b"ECNI"
RAW_VERSION = 1
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".pgm", ".tif", ".tiff")


class DatasetError(ValueError):
    pass


@dataclass
class RainPair:
    rainy: np.ndarray
    background: np.ndarray
    rain: np.ndarray
    mask: np.ndarray
    name: str = ""

    @property
    def shape(self) -> Tuple[int, int]:
        return self.rainy.shape[:2]


@dataclass
class StreakParams:
    count: Tuple[int, int] = (8, 24)
    length: Tuple[float, float] = (6.0, 18.0)
    width: Tuple[float, float] = (0.8, 1.8)
    angle: Tuple[float, float] = (-20.0, 20.0)
    intensity: Tuple[float, float] = (0.15, 0.45)
    blur_sigma: float = 0.6
    seed: int = 0

    def __post_init__(self):
        for name in ("count", "length", "width", "angle", "intensity"):
            lo, hi = getattr(self, name)
            if hi < lo:
                raise ValueError(f"streak {name} range is inverted: {(lo, hi)}")
            if name != "angle" and lo < 0:
                raise ValueError(f"streak {name} must be non-negative")
        if self.intensity[1] > 1:
            raise ValueError("streak intensity must not exceed 1")
        if self.blur_sigma < 0:
            raise ValueError("blur sigma must be non-negative")


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _segment_coverage(h: int, w: int, p0, p1, width: float) -> Tuple[slice, slice, np.ndarray]:
    pad = width + 1.0
    y0 = max(int(np.floor(min(p0[0], p1[0]) - pad)), 0)
    y1 = min(int(np.ceil(max(p0[0], p1[0]) + pad)) + 1, h)
    x0 = max(int(np.floor(min(p0[1], p1[1]) - pad)), 0)
    x1 = min(int(np.ceil(max(p0[1], p1[1]) + pad)) + 1, w)
    if y0 >= y1 or x0 >= x1:
        return slice(0, 0), slice(0, 0), np.zeros((0, 0))
    yy, xx = np.mgrid[y0:y1, x0:x1].astype(np.float64)
    d = np.subtract(p1, p0)
    seg_len2 = float(d @ d)
    t = ((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / max(seg_len2, 1e-12)
    t = np.clip(t, 0.0, 1.0)
    dist = np.hypot(yy - (p0[0] + t * d[0]), xx - (p0[1] + t * d[1]))
    return slice(y0, y1), slice(x0, x1), np.clip(width / 2 + 0.5 - dist, 0.0, 1.0)


def render_streaks(shape: Tuple[int, int], params: StreakParams = StreakParams(), seed=None) -> np.ndarray:
    """Anti-aliased streaks composited by max, then Gaussian-blurred; H x W x 3.

    Streaks are drawn sequentially from one generator, so a larger count adds
    streaks on top of the same prefix.  ``seed`` overrides ``params.seed``.
    """
    h, w = shape
    rng = _rng(params.seed if seed is None else seed)
    count = int(rng.integers(params.count[0], params.count[1] + 1))
    base = rng.uniform(*params.angle)
    layer = np.zeros((h, w), dtype=np.float64)
    for _ in range(count):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        length = rng.uniform(*params.length)
        width = rng.uniform(*params.width)
        theta = np.deg2rad(base + rng.normal(0.0, 3.0))
        amp = rng.uniform(*params.intensity)
        dy, dx = 0.5 * length * np.cos(theta), 0.5 * length * np.sin(theta)
        ys, xs, cov = _segment_coverage(h, w, (cy - dy, cx - dx), (cy + dy, cx + dx), width)
        if cov.size:
            np.maximum(layer[ys, xs], amp * cov, out=layer[ys, xs])
    if params.blur_sigma > 0:
        layer = ndimage.gaussian_filter(layer, params.blur_sigma, mode="reflect")
    layer = np.clip(layer, 0.0, 1.0).astype(np.float32)
    return np.repeat(layer[:, :, None], 3, axis=2)


def gt_mask(rain: np.ndarray, tau: float = DEFAULT_TAU) -> np.ndarray:
    return (np.asarray(rain).max(axis=-1, keepdims=True) > tau).astype(np.float32)


def _quantize(x: np.ndarray) -> np.ndarray:
    return (np.floor(np.clip(x, 0, 1) * 255.0 + 0.5).astype(np.uint8)).astype(np.float32) / np.float32(255.0)


def synthesize_pair(background: np.ndarray, params: StreakParams = StreakParams(), seed=None,
                    tau: float = DEFAULT_TAU, quantize: bool = False, name: str = "") -> RainPair:
    """Add rendered streaks to ``background`` and recompute R = I - B after clipping.

    With ``quantize`` both images are snapped to the 8-bit grid first, so a
    PNG round trip reproduces the pair exactly.
    """
    b = np.asarray(background, dtype=np.float32)
    if b.min() < 0 or b.max() > 1:
        raise ValueError("background must lie in [0, 1]")
    if quantize:
        b = _quantize(b)
    raw = render_streaks(b.shape[:2], params, seed)
    rainy = np.clip(b + raw, 0.0, 1.0).astype(np.float32)
    if quantize:
        rainy = _quantize(rainy)
    rain = rainy - b
    return RainPair(rainy, b, rain, gt_mask(rain, tau), name)


def procedural_background(shape: Tuple[int, int], seed=0, octaves: int = 5) -> np.ndarray:
    """Coloured fractal value noise in [0, 1], H x W x 3."""
    h, w = shape
    rng = _rng(seed)

    def fractal() -> np.ndarray:
        acc = np.zeros((h, w))
        amp, total = 1.0, 0.0
        for o in range(octaves):
            g = 2 ** (o + 1)
            grid = rng.random((g + 1, g + 1))
            acc += amp * ndimage.zoom(grid, (h / (g + 1), w / (g + 1)), order=3, mode="nearest")
            total += amp
            amp *= 0.55
        acc /= total
        lo, hi = acc.min(), acc.max()
        return (acc - lo) / max(hi - lo, 1e-9)

    lum = fractal()
    tint_a, tint_b = rng.uniform(0.05, 0.45, 3), rng.uniform(0.45, 0.85, 3)
    img = lum[:, :, None] * tint_b + (1 - lum[:, :, None]) * tint_a
    img += 0.12 * (np.stack([fractal() for _ in range(3)], axis=2) - 0.5)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_synthetic_pairs(count: int, size: Tuple[int, int] = (32, 32), params: StreakParams = StreakParams(),
                         seed: int = 0, tau: float = DEFAULT_TAU, quantize: bool = False) -> List[RainPair]:
    """Procedural background + streaks, one child seed per pair."""
    seeds = np.random.SeedSequence([seed, params.seed]).spawn(count)
    pairs = []
    for k, ss in enumerate(seeds):
        bg_seed, rain_seed = ss.spawn(2)
        bg = procedural_background(size, np.random.default_rng(bg_seed))
        pairs.append(synthesize_pair(bg, params, np.random.default_rng(rain_seed), tau, quantize, f"{k:05d}"))
    return pairs


def crop_pair(pair: RainPair, y: int, x: int, size: int) -> RainPair:
    sl = (slice(y, y + size), slice(x, x + size))
    return RainPair(pair.rainy[sl], pair.background[sl], pair.rain[sl], pair.mask[sl],
                    f"{pair.name}@{y},{x}")


def sample_patches(pair: RainPair, size: int = 96, count: int = 1, seed=0, divisor: int = 8) -> List[RainPair]:
    h, w = pair.shape
    if size > h or size > w:
        raise ValueError(f"patch size {size} exceeds image {h}x{w}")
    if size % divisor:
        raise ValueError(f"patch size {size} not divisible by {divisor}")
    rng = _rng(seed)
    ys = rng.integers(0, h - size + 1, count)
    xs = rng.integers(0, w - size + 1, count)
    return [crop_pair(pair, int(y), int(x), size) for y, x in zip(ys, xs)]


def pairs_to_batch(pairs: Sequence[RainPair]):
    """Stack pairs into N x C x H x W arrays (rainy, background, rain, mask)."""
    def stack(attr):
        return np.ascontiguousarray(np.stack([getattr(p, attr) for p in pairs]).transpose(0, 3, 1, 2))
    return stack("rainy"), stack("background"), stack("rain"), stack("mask")


# ---------------------------------------------------------------- image IO

def load_image(path) -> np.ndarray:
    """Decode an 8- or 16-bit image to H x W x 3 float32 RGB in [0, 1]."""
    path = Path(path)
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise OSError(f"cannot decode image {path}")
    if raw.dtype == np.uint8:
        img = raw.astype(np.float32) / np.float32(255.0)
    elif raw.dtype == np.uint16:
        img = raw.astype(np.float32) / np.float32(65535.0)
    else:
        raise OSError(f"unsupported bit depth {raw.dtype} in {path}")
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    elif img.shape[2] == 4:
        img = img[:, :, :3]
    if img.shape[2] == 3:
        img = img[:, :, ::-1]
    return np.ascontiguousarray(img)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Round half away from zero after clipping to [0, 1]."""
    return np.floor(np.clip(np.asarray(img, dtype=np.float64), 0, 1) * 255.0 + 0.5).astype(np.uint8)


def save_image(img: np.ndarray, path) -> None:
    """Write an H x W x {1,3} float image as 8-bit; format from the suffix."""
    path = Path(path)
    q = to_uint8(img)
    if q.ndim == 3 and q.shape[2] == 3:
        q = q[:, :, ::-1]
    elif q.ndim == 3:
        q = q[:, :, 0]
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), np.ascontiguousarray(q)):
        raise OSError(f"cannot write image {path}")


def write_raw(path, arr: np.ndarray) -> None:
    """Raw float dump: magic, u32 version, u32 rank, u32 extents, little-endian f32."""
    arr = np.asarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack("<II", RAW_VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_raw(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != RAW_MAGIC:
        raise ValueError(f"{path}: not an ECNI float dump")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != RAW_VERSION:
        raise ValueError(f"{path}: unsupported dump version {version}")
    shape = struct.unpack_from(f"<{rank}I", buf, 12)
    off = 12 + 4 * rank
    n = int(np.prod(shape)) if rank else 1
    if len(buf) - off != 4 * n:
        raise ValueError(f"{path}: truncated payload")
    return np.frombuffer(buf, dtype="<f4", offset=off).reshape(shape).astype(np.float32)


# ---------------------------------------------------------------- datasets

@dataclass
class DatasetIndex:
    pairs: List[Tuple[Path, Path]]
    seed: Optional[int] = None
    split: str = "all"

    def __len__(self) -> int:
        return len(self.pairs)

    def load(self, k: int, tau: float = DEFAULT_TAU) -> RainPair:
        rainy_path, bg_path = self.pairs[k]
        rainy, bg = load_image(rainy_path), load_image(bg_path)
        if rainy.shape != bg.shape:
            raise DatasetError(f"shape mismatch: {rainy_path} {rainy.shape} vs {bg_path} {bg.shape}")
        # real data need not be additive, so R may dip below zero here
        rain = rainy - bg
        return RainPair(rainy, bg, rain, gt_mask(rain, tau), Path(rainy_path).stem)

    def load_all(self, tau: float = DEFAULT_TAU) -> List[RainPair]:
        return [self.load(k, tau) for k in range(len(self))]


def _rain100_pairs(root: Path) -> List[Tuple[Path, Path]]:
    rain_dir, bg_dir = root / "rain", root / "norain"
    if not rain_dir.is_dir() or not bg_dir.is_dir():
        raise DatasetError(f"{root}: expected rain/ and norain/ subdirectories")
    bgs = {p.name: p for p in bg_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
    pairs = []
    for p in sorted(rain_dir.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        candidates = [p.name]
        if p.name.startswith("rain-"):
            candidates.append("no" + p.name)
        match = next((bgs[c] for c in candidates if c in bgs), None)
        if match is None:
            raise DatasetError(f"no background for {p} in {bg_dir}")
        pairs.append((p, match))
    return pairs


def _manifest_pairs(manifest: Path) -> List[Tuple[Path, Path]]:
    pairs = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DatasetError(f"{manifest}:{lineno}: expected 'rainy<TAB>background'")
        a, b = (Path(x) if Path(x).is_absolute() else manifest.parent / x for x in parts)
        pairs.append((a, b))
    return pairs


def load_dataset(root, layout: str = "auto", seed: Optional[int] = None, split: str = "all",
                 validate: bool = True) -> DatasetIndex:
    """Index a paired dataset.

    ``layout`` is ``rain100`` (``rain/`` + ``norain/`` matched by filename),
    ``manifest`` (a TSV file, or a directory containing ``manifest.txt``) or
    ``auto``.  Pairs are sorted, then shuffled when ``seed`` is given.
    """
    root = Path(root)
    if layout == "auto":
        if root.is_file():
            layout = "manifest"
        elif (root / "rain").is_dir() and (root / "norain").is_dir():
            layout = "rain100"
        elif (root / "manifest.txt").is_file():
            layout = "manifest"
        else:
            raise DatasetError(f"cannot infer dataset layout of {root}")
    if layout == "rain100":
        pairs = _rain100_pairs(root)
    elif layout == "manifest":
        pairs = _manifest_pairs(root if root.is_file() else root / "manifest.txt")
    else:
        raise DatasetError(f"unknown layout {layout!r}")
    pairs.sort(key=lambda ab: str(ab[0]))
    if seed is not None:
        order = np.random.default_rng(seed).permutation(len(pairs))
        pairs = [pairs[i] for i in order]
    for a, b in pairs:
        for p in (a, b):
            if not p.is_file():
                raise DatasetError(f"missing file {p}")
    if validate:
        for a, b in pairs:
            sa, sb = load_image(a).shape, load_image(b).shape
            if sa != sb:
                raise DatasetError(f"shape mismatch: {a} {sa} vs {b} {sb}")
    return DatasetIndex(pairs, seed, split)


def write_synthetic_dataset(out_dir, pairs: Sequence[RainPair]) -> Path:
    """Write rain/ norain/ mask/ trees and a manifest; returns the manifest path."""
    out = Path(out_dir)
    for sub in ("rain", "norain", "mask"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    lines = []
    for p in pairs:
        fname = f"{p.name}.png"
        save_image(p.rainy, out / "rain" / fname)
        save_image(p.background, out / "norain" / fname)
        save_image(p.mask, out / "mask" / fname)
        lines.append(f"rain/{fname}\tnorain/{fname}")
    manifest = out / "manifest.txt"
    manifest.write_text("".join(l + "\n" for l in lines))
    return manifest
