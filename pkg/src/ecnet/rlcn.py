"""Rectified local contrast normalization (RLCN).

For every pixel and colour channel the rainy image is compared with the mean
of a square window around it; only brighter-than-neighbourhood deviations
survive, normalized by the local standard deviation:

    L = max(I - mean, 0) / (std + eps)

Window sums come from integral images, so the cost does not depend on the
window size.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RlcnParams:
    window: int = 9
    epsilon: float = 1e-4

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"RLCN window must be odd and >= 3, got {self.window}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")


def _box_sum(padded: np.ndarray, window: int, h: int, w: int) -> np.ndarray:
    ii = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1) + padded.shape[2:], dtype=np.float64)
    np.cumsum(np.cumsum(padded, axis=0), axis=1, out=ii[1:, 1:])
    return ii[window:window + h, window:window + w] - ii[:h, window:window + w] \
        - ii[window:window + h, :w] + ii[:h, :w]


def local_mean_std(image: np.ndarray, window: int = 9):
    """Per-pixel, per-channel window mean and population std (reflect borders).

    ``image`` is H x W or H x W x C.  Returns float64 maps of the same shape.
    """
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    if img.ndim != 3:
        raise ValueError(f"expected H x W x C image, got shape {image.shape}")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be odd, got {window}")
    h, w = img.shape[:2]
    if window > 2 * min(h, w):
        raise ValueError(f"window {window} too large for {h}x{w} image")
    # shifting by the channel minimum keeps the integral images small and makes
    # flat regions come out exactly flat
    offset = img.min(axis=(0, 1), keepdims=True)
    shifted = img - offset
    r = window // 2
    padded = np.pad(shifted, ((r, r), (r, r), (0, 0)), mode="reflect")
    area = float(window * window)
    s1 = _box_sum(padded, window, h, w)
    s2 = _box_sum(padded * padded, window, h, w)
    mean = s1 / area
    var = np.maximum(s2 / area - mean * mean, 0.0)
    mean = mean + offset
    std = np.sqrt(var)
    if squeeze:
        return mean[:, :, 0], std[:, :, 0]
    return mean, std


def compute_rlcn(image: np.ndarray, params: RlcnParams = RlcnParams()) -> np.ndarray:
    """RLCN image with the same shape (and float dtype) as ``image``."""
    img = np.asarray(image)
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    mean, std = local_mean_std(img, params.window)
    num = np.maximum(img.astype(np.float64) - mean, 0.0)
    out = num / (std + params.epsilon)
    dtype = img.dtype if img.dtype in (np.float32, np.float64) else np.float32
    return out.astype(dtype)


def rlcn_batch(images: np.ndarray, params: RlcnParams = RlcnParams()) -> np.ndarray:
    """RLCN of an N x C x H x W batch; returns the same layout."""
    return np.stack([compute_rlcn(im.transpose(1, 2, 0), params).transpose(2, 0, 1) for im in images])
