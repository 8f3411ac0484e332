"""Dataset manifests, image decoding and deterministic batching.

Two CSV manifest kinds are understood, with paths relative to the CSV:

* MOS:  header ``ref,dist,mos``; optional sidecar ``<stem>.json`` such as
  ``{"kind": "mos", "mos_min": 0, "mos_max": 9}``.
* 2AFC: header ``ref,img0,img1,p1_fraction``.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .tensor import Tensor

logger = logging.getLogger(__name__)

MOS_COLUMNS = ("ref", "dist", "mos")
TRIPLET_COLUMNS = ("ref", "img0", "img1", "p1_fraction")
MIN_BATCH = 3


class ManifestError(ValueError):
    pass


class ImageDecodeError(ValueError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    ref_path: Path
    dist_path: Path
    mos: float
    dissimilarity: float


@dataclass(frozen=True)
class TripletRecord:
    ref_path: Path
    img0_path: Path
    img1_path: Path
    human_fraction_p1: float


@dataclass
class DatasetManifest:
    kind: str
    root: Path
    records: list
    mos_range: tuple | None = None
    name: str = ""

    def __len__(self) -> int:
        return len(self.records)

    @property
    def mos(self) -> np.ndarray:
        return np.array([r.mos for r in self.records])

    @property
    def dissimilarity(self) -> np.ndarray:
        return np.array([r.dissimilarity for r in self.records])

    def subset(self, indices: Sequence[int], name: str | None = None) -> "DatasetManifest":
        return DatasetManifest(self.kind, self.root, [self.records[i] for i in indices],
                               self.mos_range, name or self.name)


def dissimilarity_from_mos(mos, mos_min: float, mos_max: float):
    """Map MOS (higher = better) to [0, 1] dissimilarity (higher = worse)."""
    if mos_max <= mos_min:
        raise ManifestError(f"empty MOS range [{mos_min}, {mos_max}]")
    return (mos_max - np.asarray(mos, dtype=np.float64)) / (mos_max - mos_min)


def _sidecar(path: Path) -> dict:
    side = path.with_suffix(".json")
    if not side.exists():
        return {}
    try:
        return json.loads(side.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{side}: invalid JSON ({exc})") from None


def _real(value: str, what: str, lineno: int) -> float:
    try:
        x = float(value)
    except (TypeError, ValueError):
        raise ManifestError(f"row {lineno}: {what} {value!r} is not a number") from None
    if not np.isfinite(x):
        raise ManifestError(f"row {lineno}: {what} {value!r} is not finite")
    return x


def _existing(root: Path, rel: str, lineno: int, check: bool) -> Path:
    if not rel:
        raise ManifestError(f"row {lineno}: empty path")
    p = Path(rel)
    p = p if p.is_absolute() else root / p
    if check and not p.exists():
        raise ManifestError(f"row {lineno}: missing file {p}")
    return p


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a MOS or 2AFC manifest CSV."""
    path = Path(path)
    root = path.parent
    meta = _sidecar(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = tuple(h.strip() for h in (reader.fieldnames or ()))
        rows = [{k.strip(): (v or "").strip() for k, v in row.items() if k} for row in reader]
    kind = meta.get("kind")
    if kind is None:
        kind = "2afc" if "p1_fraction" in header else "mos"
    if kind not in ("mos", "2afc"):
        raise ManifestError(f"{path}: unknown manifest kind {kind!r}")
    required = MOS_COLUMNS if kind == "mos" else TRIPLET_COLUMNS
    missing = [c for c in required if c not in header]
    if missing:
        raise ManifestError(f"{path}: missing column(s) {', '.join(missing)}")
    if not rows:
        raise ManifestError(f"{path}: manifest has no records")

    name = meta.get("name", path.stem)
    if kind == "2afc":
        records = []
        for i, row in enumerate(rows, start=2):
            p1 = _real(row["p1_fraction"], "p1_fraction", i)
            if not 0.0 <= p1 <= 1.0:
                raise ManifestError(f"row {i}: p1_fraction {p1} outside [0, 1]")
            records.append(TripletRecord(_existing(root, row["ref"], i, check_files),
                                         _existing(root, row["img0"], i, check_files),
                                         _existing(root, row["img1"], i, check_files), p1))
        return DatasetManifest("2afc", root, records, None, name)

    mos = [_real(row["mos"], "mos", i) for i, row in enumerate(rows, start=2)]
    if "mos_min" in meta and "mos_max" in meta:
        lo, hi = float(meta["mos_min"]), float(meta["mos_max"])
    else:
        lo, hi = min(mos), max(mos)
        logger.warning("%s: no MOS range declared; using observed [%g, %g]", path, lo, hi)
    if hi <= lo:
        raise ManifestError(f"{path}: MOS range [{lo}, {hi}] is empty")
    dis = dissimilarity_from_mos(mos, lo, hi)
    records = []
    for i, (row, m, d) in enumerate(zip(rows, mos, dis), start=2):
        if not lo <= m <= hi:
            raise ManifestError(f"row {i}: mos {m} outside declared range [{lo}, {hi}]")
        records.append(SampleRecord(_existing(root, row["ref"], i, check_files),
                                    _existing(root, row["dist"], i, check_files), m, float(d)))
    return DatasetManifest("mos", root, records, (lo, hi), name)


def write_mos_manifest(path, rows, mos_range: tuple | None = None) -> Path:
    """Write ``(ref, dist, mos)`` rows (paths relative to the CSV) plus the JSON sidecar."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(MOS_COLUMNS)
        for ref, dist, mos in rows:
            w.writerow([ref, dist, repr(float(mos))])
    if mos_range is not None:
        side = {"kind": "mos", "mos_min": mos_range[0], "mos_max": mos_range[1]}
        path.with_suffix(".json").write_text(json.dumps(side), encoding="utf-8")
    return path


def write_2afc_manifest(path, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TRIPLET_COLUMNS)
        for ref, i0, i1, p1 in rows:
            w.writerow([ref, i0, i1, repr(float(p1))])
    return path


def decode_image(path) -> Tensor:
    """Read an 8-bit PNG or BMP into a 1 x 3 x h x w tensor scaled to [0, 1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.format not in ("PNG", "BMP"):
                raise ImageDecodeError(f"{path}: unsupported format {im.format}")
            if im.mode in ("L", "P", "RGB", "RGBA", "LA", "1"):
                im = im.convert("RGB")
            else:
                raise ImageDecodeError(f"{path}: unsupported pixel mode {im.mode}")
            arr = np.asarray(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageDecodeError(f"{path}: cannot decode ({exc})") from None
    x = arr.astype(np.float32).transpose(2, 0, 1)[None] / np.float32(255.0)
    return Tensor(x)


def save_image(path, array) -> None:
    """Write an (h, w) or (3, h, w) array in [0, 1] as an 8-bit PNG (or BMP/PGM by suffix)."""
    a = np.asarray(array, dtype=np.float64)
    if a.ndim == 4:
        a = a[0]
    if a.ndim == 3:
        a = a.transpose(1, 2, 0)
        if a.shape[2] == 1:
            a = a[..., 0]
    u8 = np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8).save(path)


def _crop_box(shape, crop: int | None, mode: str, rng: np.random.Generator):
    h, w = shape[-2:]
    if crop is None:
        return 0, 0, h, w
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} larger than image {h}x{w}")
    if mode == "center":
        top, left = (h - crop) // 2, (w - crop) // 2
    else:
        top, left = int(rng.integers(0, h - crop + 1)), int(rng.integers(0, w - crop + 1))
    return top, left, crop, crop


@dataclass
class PairArrays:
    """In-memory MOS-style data: reference/distorted stacks with dissimilarity targets."""

    ref: np.ndarray
    dist: np.ndarray
    dissimilarity: np.ndarray
    mos: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.ref)


@dataclass
class Batch:
    ref: np.ndarray
    dist: np.ndarray
    dissimilarity: np.ndarray
    indices: np.ndarray
    offsets: list = field(default_factory=list)

    def __iter__(self):
        return iter((self.ref, self.dist, self.dissimilarity))


class ImageCache:
    """Memoizing image decoder; training revisits the same files every epoch."""

    def __init__(self, max_items: int = 2048):
        self.max_items = max_items
        self._cache: OrderedDict[Path, np.ndarray] = OrderedDict()

    def __call__(self, path: Path) -> np.ndarray:
        arr = self._cache.get(path)
        if arr is None:
            arr = decode_image(path).data[0]
            self._cache[path] = arr
            if len(self._cache) > self.max_items:
                self._cache.popitem(last=False)
        else:
            self._cache.move_to_end(path)
        return arr


def _fetch(source, i: int, cache: ImageCache):
    if isinstance(source, PairArrays):
        return source.ref[i], source.dist[i], float(source.dissimilarity[i])
    rec = source.records[i]
    return cache(rec.ref_path), cache(rec.dist_path), rec.dissimilarity


def batches(source, batch_size: int, seed: int, crop: int | None = None,
            crop_mode: str = "random", shuffle: bool = True,
            cache: ImageCache | None = None) -> Iterator[Batch]:
    """Yield shuffled minibatches of aligned (reference, distorted) crops.

    The order and crop offsets depend only on ``seed``; the final batch is
    dropped when smaller than three pairs, since a correlation needs variance.
    """
    if batch_size < MIN_BATCH:
        raise ValueError(f"batch_size must be >= {MIN_BATCH}, got {batch_size}")
    if isinstance(source, DatasetManifest) and source.kind != "mos":
        raise ValueError("batches() needs a MOS manifest")
    if crop_mode not in ("random", "center"):
        raise ValueError(f"unknown crop mode {crop_mode!r}")
    cache = cache or ImageCache()
    rng = np.random.default_rng(seed)
    n = len(source)
    order = rng.permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) < MIN_BATCH:
            break
        refs, dists, ys, offsets = [], [], [], []
        for i in idx:
            r, d, y = _fetch(source, int(i), cache)
            if r.shape != d.shape:
                raise ValueError(f"record {i}: reference {r.shape} and distorted {d.shape} differ")
            top, left, hh, ww = _crop_box(r.shape, crop, crop_mode, rng)
            refs.append(r[..., top:top + hh, left:left + ww])
            dists.append(d[..., top:top + hh, left:left + ww])
            ys.append(y)
            offsets.append((top, left))
        try:
            ref_b, dist_b = np.stack(refs), np.stack(dists)
        except ValueError:
            raise ValueError("images in a batch differ in size; pass a crop size") from None
        yield Batch(ref_b.astype(np.float32), dist_b.astype(np.float32),
                    np.array(ys), np.asarray(idx), offsets)


def split_by_reference(manifest: DatasetManifest, test_fraction: float = 0.16,
                       seed: int = 0) -> tuple[DatasetManifest, DatasetManifest]:
    """Split a MOS manifest so no reference image appears in both halves."""
    refs = sorted({str(r.ref_path) for r in manifest.records})
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(refs))
    n_test = max(1, int(round(test_fraction * len(refs))))
    test_refs = {refs[i] for i in perm[:n_test]}
    train_idx = [i for i, r in enumerate(manifest.records) if str(r.ref_path) not in test_refs]
    test_idx = [i for i, r in enumerate(manifest.records) if str(r.ref_path) in test_refs]
    return (manifest.subset(train_idx, f"{manifest.name}-train"),
            manifest.subset(test_idx, f"{manifest.name}-test"))
