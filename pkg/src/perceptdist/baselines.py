"""Classical full-reference image quality metrics.

All metrics take images as arrays shaped ``(h, w)``, ``(c, h, w)`` or
``(1, c, h, w)`` with values in [0, 1]. Colour inputs are reduced to
luminance for the SSIM family and NLAPD.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .tensor import GdnParams, Tensor, l2_feature_distance, mul, power, add

logger = logging.getLogger(__name__)

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
MSSSIM_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _as_array(img) -> np.ndarray:
    arr = img.data if isinstance(img, Tensor) else img
    return np.asarray(arr, dtype=np.float64)


def to_luminance(img) -> np.ndarray:
    """Collapse an image to a single (h, w) luminance plane."""
    x = _as_array(img)
    if x.ndim == 4:
        if x.shape[0] != 1:
            raise ValueError(f"expected a single image, got batch of {x.shape[0]}")
        x = x[0]
    if x.ndim == 3:
        if x.shape[0] == 1:
            return x[0]
        if x.shape[0] != 3:
            raise ValueError(f"expected 1 or 3 channels, got {x.shape[0]}")
        return np.tensordot(LUMA_WEIGHTS, x, axes=1)
    if x.ndim != 2:
        raise ValueError(f"unsupported image shape {x.shape}")
    return x


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def mse(a, b) -> float:
    a, b = _as_array(a), _as_array(b)
    _check_same(a, b)
    d = a - b
    return float(np.mean(d * d))


def psnr(a, b, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    err = mse(a, b)
    if err == 0:
        return float("inf")
    return float(10.0 * np.log10(data_range ** 2 / err))


def l2(a, b) -> float:
    a, b = _as_array(a), _as_array(b)
    _check_same(a, b)
    return float(np.sqrt(np.sum((a - b) ** 2)))


# ---------------------------------------------------------------------------
# SSIM family


@dataclass(frozen=True)
class SsimParams:
    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("k1 and k2 must be positive")

    def window_1d(self) -> np.ndarray:
        r = np.arange(self.window_size) - (self.window_size - 1) / 2
        g = np.exp(-(r ** 2) / (2 * self.sigma ** 2))
        return g / g.sum()

    def window(self) -> np.ndarray:
        g = self.window_1d()
        return np.outer(g, g)


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    x = sliding_window_view(x, k, axis=0) @ g
    return sliding_window_view(x, k, axis=1) @ g


def _ssim_maps(a: np.ndarray, b: np.ndarray, params: SsimParams):
    g = params.window_1d()
    c1 = (params.k1 * params.dynamic_range) ** 2
    c2 = (params.k2 * params.dynamic_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    lum = (2 * mu_a * mu_b + c1) / (mu_a ** 2 + mu_b ** 2 + c1)
    return lum * cs, cs


def ssim(a, b, params: SsimParams | None = None) -> float:
    """Mean structural similarity over all fully-covered 11x11 Gaussian windows."""
    params = params or SsimParams()
    a, b = to_luminance(a), to_luminance(b)
    _check_same(a, b)
    if min(a.shape) < params.window_size:
        raise ValueError(f"image {a.shape} smaller than the {params.window_size}px window")
    smap, _ = _ssim_maps(a, b, params)
    return float(np.clip(smap.mean(), -1.0, 1.0))


def msssim_scales(shape, window_size: int = 11, max_scales: int = 5) -> int:
    m = min(shape)
    if m < window_size:
        return 0
    return int(min(max_scales, np.floor(np.log2(m / window_size)) + 1))


def msssim(a, b, params: SsimParams | None = None,
           weights: np.ndarray = MSSSIM_WEIGHTS) -> float:
    """Multi-scale SSIM over up to five dyadic scales.

    Images too small for all scales use fewer, with the weights renormalized.
    Negative per-scale terms are clamped to zero before exponentiation.
    """
    params = params or SsimParams()
    a, b = to_luminance(a), to_luminance(b)
    _check_same(a, b)
    n = msssim_scales(a.shape, params.window_size, len(weights))
    if n == 0:
        raise ValueError(f"image {a.shape} smaller than the {params.window_size}px window")
    if n < len(weights):
        warnings.warn(f"image {a.shape} too small for {len(weights)} scales; using {n}",
                      stacklevel=2)
    w = np.asarray(weights[:n], dtype=np.float64)
    w = w / w.sum()
    vals = []
    for s in range(n):
        smap, cs = _ssim_maps(a, b, params)
        vals.append(smap.mean() if s == n - 1 else cs.mean())
        if s < n - 1:
            a, b = _halve(a), _halve(b)
    vals = np.maximum(np.array(vals), 0.0)
    return float(np.prod(vals ** w))


def _halve(x: np.ndarray) -> np.ndarray:
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


# ---------------------------------------------------------------------------
# Laplacian pyramid


def _blur(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    x = ndimage.correlate1d(x, kernel, axis=-2, mode="mirror")
    return ndimage.correlate1d(x, kernel, axis=-1, mode="mirror")


def pyr_down(x: np.ndarray) -> np.ndarray:
    return _blur(x, BINOMIAL5)[..., ::2, ::2]


def pyr_up(x: np.ndarray, shape: tuple) -> np.ndarray:
    up = np.zeros(x.shape[:-2] + tuple(shape[-2:]))
    up[..., ::2, ::2] = x
    return _blur(up, 2.0 * BINOMIAL5)


@dataclass
class LaplacianPyramid:
    levels: list
    lowpass: np.ndarray

    @classmethod
    def build(cls, x, n_levels: int = 6) -> "LaplacianPyramid":
        """Decompose the last two axes of ``x`` into ``n_levels`` bands plus a residual."""
        cur = np.asarray(x, dtype=np.float64)
        bands = []
        for _ in range(n_levels):
            if min(cur.shape[-2:]) < 2:
                raise ValueError(f"image too small for a {n_levels}-level pyramid")
            low = pyr_down(cur)
            bands.append(cur - pyr_up(low, cur.shape))
            cur = low
        return cls(bands, cur)

    def collapse(self) -> np.ndarray:
        cur = self.lowpass
        for band in reversed(self.levels):
            cur = band + pyr_up(cur, band.shape)
        return cur

    def coefficients(self) -> list:
        return [*self.levels, self.lowpass]


def local_energy(band: np.ndarray, size: int = 5) -> np.ndarray:
    """Box-filtered squared coefficients over the last two axes."""
    sq = band * band
    box = np.full(size, 1.0 / size)
    return _blur(sq, box)


class NlapdGdnModel:
    """Normalized Laplacian pyramid distance with a trainable divisive normalization.

    Each coefficient band ``b`` (the six bandpass levels and the lowpass
    residual) is mapped to ``b / sqrt(beta + gamma * E)`` where ``E`` is the
    5x5 local energy of ``b``. The distance is the mean over bands of the
    root-mean-square difference of normalized coefficients.
    """

    kind = "nlapd-gdn"

    def __init__(self, levels: int = 6, seed: int = 0, beta: float = 1.0, gamma: float = 0.1):
        self.levels = int(levels)
        self.seed = int(seed)
        self.gdns = [GdnParams.create(1, diagonal_only=True, beta=beta, gamma=gamma)
                     for _ in range(self.levels + 1)]

    @classmethod
    def identity(cls, levels: int = 6) -> "NlapdGdnModel":
        return cls(levels, beta=1.0, gamma=0.0)

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for i, g in enumerate(self.gdns):
            params[f"level{i}.beta"] = g.beta
            params[f"level{i}.gamma"] = g.gamma
        return params

    def gdn_layers(self) -> list[GdnParams]:
        return list(self.gdns)

    def project(self) -> None:
        for g in self.gdns:
            g.project()

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def config_dict(self) -> dict:
        return {"model": self.kind, "levels": self.levels}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state) -> None:
        from .model import _load_state
        _load_state(self, state)

    def _pyramids(self, images) -> list:
        x = _as_array(images)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1] == 3:
            x = np.tensordot(x, LUMA_WEIGHTS, axes=([1], [0]))
        elif x.shape[1] == 1:
            x = x[:, 0]
        else:
            raise ValueError(f"expected 1 or 3 channels, got shape {x.shape}")
        return LaplacianPyramid.build(x, self.bands_for(x.shape[-2:])).coefficients()

    def bands_for(self, shape) -> int:
        """Number of bandpass levels an image of ``shape`` supports (at most ``levels``)."""
        n, m = 0, min(shape)
        while n < self.levels and m >= 2:
            m = (m + 1) // 2
            n += 1
        if n < self.levels:
            warnings.warn(f"image {tuple(shape)} supports only {n} pyramid levels", stacklevel=3)
        return n

    def _layers_for(self, n_bands: int) -> list:
        return self.gdns[:n_bands] + [self.gdns[-1]]

    def pair_distance(self, ref, dist) -> Tensor:
        ref_c, dist_c = self._pyramids(ref), self._pyramids(dist)
        if len(ref_c[0]) != len(dist_c[0]) or ref_c[0].shape != dist_c[0].shape:
            raise ValueError("shape mismatch between reference and distorted batches")
        layers = self._layers_for(len(ref_c) - 1)
        total = None
        for g, br, bd in zip(layers, ref_c, dist_c):
            zr = _normalize_band(br, g)
            zd = _normalize_band(bd, g)
            per_pixel = 1.0 / np.sqrt(br[0].size)
            rms = mul(l2_feature_distance(zr, zd), per_pixel)
            total = rms if total is None else add(total, rms)
        return mul(total, 1.0 / len(layers))

    def distance(self, a, b) -> float:
        return float(self.pair_distance(a, b).data[0])


def _normalize_band(band: np.ndarray, g: GdnParams) -> Tensor:
    energy = local_energy(band)
    denom = add(g.beta, mul(g.gamma, Tensor(energy)))
    return mul(Tensor(band), power(denom, -0.5))


def nlapd_distance(model: NlapdGdnModel, a, b) -> float:
    a, b = _as_array(a), _as_array(b)
    _check_same(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    return model.distance(a, b)
