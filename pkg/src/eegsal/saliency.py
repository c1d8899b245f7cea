"""Saliency maps: normalization, resizing and a spectral-residual fallback predictor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage.transform import resize

from .errors import ConfigurationError, ContractError

EPS = 1e-7
AMP_FLOOR = 1e-3
TAGS = ("raw", "max1", "sum1")


@dataclass
class SaliencyMap:
    data: np.ndarray
    norm: str = "raw"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ContractError(f"saliency map must be 2-D, got shape {self.data.shape}")
        if self.norm not in TAGS:
            raise ContractError(f"unknown normalization tag {self.norm!r}")

    @property
    def shape(self):
        return self.data.shape


def as_map(m) -> SaliencyMap:
    return m if isinstance(m, SaliencyMap) else SaliencyMap(np.asarray(m, dtype=np.float64))


def _check_valid(a: np.ndarray):
    if not np.isfinite(a).all():
        raise ContractError("saliency map contains non-finite values")
    if (a < 0).any():
        raise ContractError("saliency map contains negative values")


def normalize(m, mode: str) -> SaliencyMap:
    """``max1`` divides by the maximum (all-zero maps stay ``raw``);
    ``sum1`` adds ``EPS`` to every cell then divides by the total."""
    a = as_map(m).data
    _check_valid(a)
    if mode == "max1":
        peak = a.max()
        if peak == 0:
            return SaliencyMap(a.copy(), "raw")
        return SaliencyMap(a / peak, "max1")
    if mode == "sum1":
        a = a + EPS
        return SaliencyMap(a / a.sum(), "sum1")
    raise ConfigurationError(f"normalization mode must be 'max1' or 'sum1', got {mode!r}")


def to_gray(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    if image.shape[0] == 3:
        return 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]
    if image.shape[0] == 1:
        return image[0]
    raise ContractError(f"expected [3, H, W] or [H, W] image, got {image.shape}")


def spectral_residual(image) -> SaliencyMap:
    """Bottom-up saliency from the residual of the log-amplitude spectrum.

    The blur width is ``H / 32``. Constant images have no residual and
    return an all-zero map tagged ``raw``.
    """
    gray = to_gray(image)
    h, w = gray.shape
    if h < 2 or w < 2:
        raise ConfigurationError(f"image {gray.shape} too small for spectral residual")
    if np.ptp(gray) == 0:
        return SaliencyMap(np.zeros_like(gray), "raw")
    spec = np.fft.fft2(gray)
    amp = np.abs(spec)
    # exact spectral zeros (e.g. a 2-pixel box at Nyquist) would dominate the residual
    log_amp = np.log(amp + AMP_FLOOR * amp.max())
    phase = np.angle(spec)
    residual = log_amp - ndimage.uniform_filter(log_amp, size=3, mode="wrap")
    recon = np.fft.ifft2(np.exp(residual + 1j * phase))
    sal = np.abs(recon) ** 2
    sal = ndimage.gaussian_filter(sal, sigma=h / 32.0, mode="wrap")
    return normalize(np.maximum(sal, 0.0), "max1")


def resize_map(m, height: int, width: int) -> SaliencyMap:
    """Bilinear resampling, renormalized according to the input's tag."""
    if height < 1 or width < 1:
        raise ConfigurationError("target dimensions must be positive")
    sm = as_map(m)
    _check_valid(sm.data)
    if sm.shape == (height, width):
        return SaliencyMap(sm.data.copy(), sm.norm)
    out = resize(sm.data, (height, width), order=1, mode="edge", anti_aliasing=False, preserve_range=True)
    out = np.maximum(out, 0.0)
    if sm.norm in ("max1", "sum1"):
        return normalize(out, sm.norm)
    return SaliencyMap(out, "raw")
