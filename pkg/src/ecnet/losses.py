"""Training objectives and image-quality metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

PSNR_CAP = 100.0


def default_stage_weights(n: int) -> List[float]:
    """0.5 for every stage but the last, 1.5 for the last; a lone stage gets 1."""
    if n < 1:
        raise ValueError("need at least one stage")
    if n == 1:
        return [1.0]
    return [0.5] * (n - 1) + [1.5]


@dataclass
class LossWeights:
    embed: float = 0.02
    att: float = 0.1
    image: float = 1.0
    stages: Optional[List[float]] = None

    def __post_init__(self):
        if min(self.embed, self.att, self.image) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.stages is not None and any(w < 0 for w in self.stages):
            raise ValueError("stage weights must be non-negative")

    def stage_weights(self, n: int) -> List[float]:
        w = default_stage_weights(n) if self.stages is None else list(self.stages)
        if len(w) != n:
            raise ValueError(f"{len(w)} stage weights for {n} stages")
        return w


@dataclass
class SsimParams:
    window: int = 11
    sigma: float = 1.5
    peak: float = 1.0

    @property
    def c1(self) -> float:
        return (0.01 * self.peak) ** 2

    @property
    def c2(self) -> float:
        return (0.03 * self.peak) ** 2

    def kernel(self) -> np.ndarray:
        r = np.arange(self.window, dtype=np.float64) - (self.window - 1) / 2
        g = np.exp(-0.5 * (r / self.sigma) ** 2)
        return g / g.sum()


@dataclass
class Targets:
    background: Tensor
    mask: Optional[np.ndarray] = None       # N x 1 x H x W in {0, 1}
    embedding: Optional[Tensor] = None      # ideal embedding from the autoencoder


def _mean_abs(a: Tensor, b: Tensor) -> Tensor:
    return T.reduce_mean(T.absolute(T.sub(a, b)))


def _mse(a: Tensor, b: Tensor) -> Tensor:
    return T.reduce_mean(T.square(T.sub(a, b)))


def loss_embed(z_ideal: Tensor, z: Tensor) -> Tensor:
    """Mean absolute difference between the ideal and predicted embeddings."""
    return _mean_abs(z, z_ideal)


def loss_self(rain: Tensor, rain_hat: Tensor) -> Tensor:
    return _mse(rain_hat, rain)


def avg_pool(mask: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return mask
    n, c, h, w = mask.shape
    if h % factor or w % factor:
        raise ValueError(f"mask {h}x{w} not divisible by {factor}")
    return mask.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))


def loss_att(maps: Sequence[Tensor], mask: np.ndarray) -> Tensor:
    """Mean over scales of the MSE between each map and the average-pooled mask.

    ``maps[k]`` lives at scale k+1, i.e. is downsampled by 2**k.
    """
    if not maps:
        raise ValueError("no attention maps")
    terms = []
    for k, m in enumerate(maps):
        target = avg_pool(np.asarray(mask, dtype=m.dtype), 2 ** k)
        if target.shape != m.shape:
            raise ValueError(f"attention map {m.shape} vs pooled mask {target.shape}")
        terms.append(_mse(m, Tensor(target)))
    return T.sum_scalars(terms, [1.0 / len(terms)] * len(terms))


def ssim_map(x: Tensor, y: Tensor, params: SsimParams = SsimParams()) -> Tensor:
    """Per-channel SSIM map over the valid region of an N x C x H x W pair."""
    if x.shape != y.shape:
        raise ValueError(f"ssim: shape mismatch {x.shape} vs {y.shape}")
    k = params.kernel()
    c1, c2 = params.c1, params.c2
    filt = lambda t: T.filter2d_valid(t, k)
    mx, my = filt(x), filt(y)
    mxx, myy, mxy = T.hadamard(mx, mx), T.hadamard(my, my), T.hadamard(mx, my)
    vx = T.sub(filt(T.hadamard(x, x)), mxx)
    vy = T.sub(filt(T.hadamard(y, y)), myy)
    cxy = T.sub(filt(T.hadamard(x, y)), mxy)
    num = T.hadamard(T.add_scalar(T.scale(mxy, 2.0), c1), T.add_scalar(T.scale(cxy, 2.0), c2))
    den = T.hadamard(T.add_scalar(T.add(mxx, myy), c1), T.add_scalar(T.add(vx, vy), c2))
    return T.div(num, den)


def ssim(x: Tensor, y: Tensor, params: SsimParams = SsimParams()) -> Tensor:
    """Mean SSIM; every channel has the same valid area, so this is the mean of channel means."""
    return T.reduce_mean(ssim_map(x, y, params))


def loss_image(background: Tensor, background_hat: Tensor) -> Tensor:
    return T.scale(ssim(background, background_hat), -1.0)


def loss_total(stage, targets: Targets, weights: LossWeights = LossWeights()) -> Tuple[Tensor, Dict[str, float]]:
    """Weighted per-stage objective and its unweighted components.

    Terms whose weight is zero or whose inputs are unavailable (no attention
    maps, no ideal embedding) are left out of the graph and reported as 0.
    """
    terms, ws, parts = [], [], {"embed": 0.0, "att": 0.0, "image": 0.0}
    if weights.embed > 0 and targets.embedding is not None:
        le = loss_embed(targets.embedding, stage.embedding)
        terms.append(le), ws.append(weights.embed)
        parts["embed"] = float(le.data)
    if weights.att > 0 and stage.maps and targets.mask is not None:
        la = loss_att(stage.maps, targets.mask)
        terms.append(la), ws.append(weights.att)
        parts["att"] = float(la.data)
    li = loss_image(targets.background, stage.background)
    terms.append(li), ws.append(weights.image)
    parts["image"] = float(li.data)
    return T.sum_scalars(terms, ws), parts


def loss_recurrent(stages: Sequence, targets: Targets, weights: LossWeights = LossWeights()):
    """Sum of per-stage objectives weighted by the stage weights.

    Returns (loss, list of per-stage component dicts, list of per-stage totals).
    """
    sw = weights.stage_weights(len(stages))
    totals, parts = [], []
    for st in stages:
        lt, p = loss_total(st, targets, weights)
        totals.append(lt)
        parts.append(p)
    return T.sum_scalars(totals, sw), parts, [float(t.data) for t in totals]


# ---------------------------------------------------------------- metrics on arrays

def psnr(x: np.ndarray, y: np.ndarray, peak: float = 1.0) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"psnr: shape mismatch {x.shape} vs {y.shape}")
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(peak * peak / mse), PSNR_CAP))


def to_luma(img: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 luma of an N x 3 x H x W (or 3 x H x W) array, channel kept."""
    img = np.asarray(img)
    ch = -3
    r, g, b = np.take(img, 0, axis=ch), np.take(img, 1, axis=ch), np.take(img, 2, axis=ch)
    return np.expand_dims(0.299 * r + 0.587 * g + 0.114 * b, axis=ch)


def ssim_np(x: np.ndarray, y: np.ndarray, params: SsimParams = SsimParams()) -> float:
    """SSIM of two arrays (C x H x W or N x C x H x W), computed in float64."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim == 3:
        x, y = x[None], y[None]
    with T.no_grad():
        return float(ssim(Tensor(x), Tensor(y), params).data)
