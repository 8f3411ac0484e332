"""Small synthetic datasets for smoke tests and demos."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy import ndimage

from .data import PairArrays, save_image, write_2afc_manifest, write_mos_manifest

NOISE_AMPLITUDES = (0.02, 0.05, 0.1, 0.2)


def smooth_images(n: int, size: int = 32, seed: int = 0) -> np.ndarray:
    """``n`` colourful, spatially smooth RGB images in [0, 1], shape (n, 3, size, size)."""
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((n, 3, size, size))
    smooth = ndimage.gaussian_filter(noise, sigma=(0, 0, size / 10, size / 10), mode="wrap")
    smooth /= smooth.std(axis=(1, 2, 3), keepdims=True)
    return np.clip(0.5 + 0.18 * smooth, 0.0, 1.0).astype(np.float32)


def noise_amplitude_pairs(n_images: int = 3, size: int = 32, amplitudes=NOISE_AMPLITUDES,
                          seed: int = 0) -> PairArrays:
    """Gaussian-noise distortions of each image at every amplitude.

    The dissimilarity target is the amplitude rank scaled to [0, 1]; the
    MOS is its mirror image on a 0..9 scale.
    """
    rng = np.random.default_rng(seed + 1)
    refs = smooth_images(n_images, size, seed)
    ref, dist, rank = [], [], []
    for img in refs:
        for r, amp in enumerate(amplitudes):
            noisy = np.clip(img + amp * rng.standard_normal(img.shape), 0.0, 1.0)
            ref.append(img)
            dist.append(noisy.astype(np.float32))
            rank.append(r)
    rank = np.array(rank, dtype=np.float64)
    dis = rank / (len(amplitudes) - 1)
    return PairArrays(np.stack(ref), np.stack(dist), dis, 9.0 * (1.0 - dis))


def write_mos_dataset(root, pairs: PairArrays, mos_range=(0.0, 9.0), name: str = "synthetic") -> Path:
    """Save ``pairs`` as PNGs plus a MOS manifest under ``root``; returns the CSV path."""
    root = Path(root)
    (root / "img").mkdir(parents=True, exist_ok=True)
    rows = []
    ref_names: dict[bytes, str] = {}
    for i in range(len(pairs)):
        key = pairs.ref[i].tobytes()
        if key not in ref_names:
            ref_names[key] = f"img/ref{len(ref_names):02d}.png"
            save_image(root / ref_names[key], pairs.ref[i])
        dname = f"img/dist{i:03d}.png"
        save_image(root / dname, pairs.dist[i])
        rows.append((ref_names[key], dname, float(pairs.mos[i])))
    return write_mos_manifest(root / f"{name}.csv", rows, mos_range)


def write_2afc_dataset(root, n: int = 8, size: int = 32, seed: int = 0,
                       name: str = "triplets") -> Path:
    """Triplets where one image is slightly and the other strongly noised."""
    root = Path(root)
    (root / "img").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    refs = smooth_images(n, size, seed)
    rows = []
    for i, img in enumerate(refs):
        lo = np.clip(img + 0.03 * rng.standard_normal(img.shape), 0, 1)
        hi = np.clip(img + 0.15 * rng.standard_normal(img.shape), 0, 1)
        first_is_closer = bool(rng.integers(0, 2))
        i0, i1 = (lo, hi) if first_is_closer else (hi, lo)
        p1 = float(rng.uniform(0.0, 0.4) if first_is_closer else rng.uniform(0.6, 1.0))
        names = [f"img/t{i:03d}_{s}.png" for s in ("ref", "0", "1")]
        for fname, arr in zip(names, (img, i0, i1)):
            save_image(root / fname, arr)
        rows.append((*names, p1))
    return write_2afc_manifest(root / f"{name}.csv", rows)
