"""Channel-difference maps and Fourier receptive fields of a trained PerceptNet."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data import save_image
from .tensor import Tensor, backward, mul, tsum


def channel_differences(model, ref, dist) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(|f(ref) - f(dist)|`` per channel, per-channel l2 norm of the difference)."""
    fr = model.forward(_single(ref)).data[0].astype(np.float64)
    fd = model.forward(_single(dist)).data[0].astype(np.float64)
    diff = np.abs(fr - fd)
    contrib = np.sqrt((diff * diff).reshape(diff.shape[0], -1).sum(axis=1))
    return diff, contrib


def _single(x) -> Tensor:
    a = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float32)
    return Tensor(a[None] if a.ndim == 3 else a)


def minmax_to_unit(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    if hi <= lo:
        return np.zeros_like(a, dtype=np.float64)
    return (a - lo) / (hi - lo)


def viz_diff(model, ref, dist, top_k: int, out_dir, fmt: str = "png") -> dict:
    """Write the ``top_k`` channels with the largest difference as 8-bit images.

    Channels are ranked by the l2 norm of their difference (stable for ties);
    each map is min-max scaled to [0, 255]. ``index.json`` lists the channels.
    """
    n_channels = model.out_channels
    if not 1 <= top_k <= n_channels:
        raise ValueError(f"top-k must be in [1, {n_channels}], got {top_k}")
    if fmt not in ("png", "pgm"):
        raise ValueError(f"unknown image format {fmt!r}")
    diff, contrib = channel_differences(model, ref, dist)
    order = np.argsort(-contrib, kind="stable")[:top_k]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for c in order:
        fname = f"channel_{int(c):03d}.{fmt}"
        save_image(out_dir / fname, minmax_to_unit(diff[c]))
        entries.append({"channel": int(c), "contribution": float(contrib[c]), "file": fname})
    index = {"channels": entries}
    (out_dir / "index.json").write_text(json.dumps(index, indent=2), encoding="utf-8")
    return index


def input_gradient(model, channel: int, size: int = 128, gray: float = 0.5) -> np.ndarray:
    """Gradient of the mean activation of ``channel`` w.r.t. a uniform gray image."""
    if not 0 <= channel < model.out_channels:
        raise ValueError(f"channel must be in [0, {model.out_channels}), got {channel}")
    x = Tensor(np.full((1, 3, size, size), gray), requires_grad=True)
    out = model.forward(x)
    mask = np.zeros(out.shape)
    mask[:, channel] = 1.0 / (out.shape[2] * out.shape[3])
    backward(tsum(mul(out, mask)))
    model.zero_grad()
    return x.grad[0].astype(np.float64)


def receptive_field_spectrum(model, channel: int, size: int = 128) -> np.ndarray:
    """Centered log(1 + |DFT|) of the channel-averaged input gradient (unscaled)."""
    if size < 4 or size & (size - 1):
        raise ValueError(f"size must be a power of two >= 4, got {size}")
    g = input_gradient(model, channel, size).mean(axis=0)
    mag = np.abs(np.fft.fftshift(np.fft.fft2(g)))
    return np.log1p(mag)


def viz_rf(model, channel: int, size: int, out) -> np.ndarray:
    spec = receptive_field_spectrum(model, channel, size)
    peak = spec.max()
    scaled = spec / peak if peak > 0 else np.zeros_like(spec)
    save_image(out, scaled)
    return spec
