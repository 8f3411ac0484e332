"""Correlation-loss training for PerceptNet and NLAPD-GDN.

The loss for a minibatch is ``1 - pearson(d, y)`` where ``d`` are the
feature-space distances between reference and distorted images and ``y`` is
the human dissimilarity. Parameters are updated with Adam, then projected
back onto the GDN positivity constraints.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import evaluator
from . import model as model_io
from .data import ImageCache, PairArrays, batches
from .tensor import DegenerateBatchError, NonFiniteError, Tensor, backward, pearson

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    crop: int | None = None
    crop_mode: str = "random"
    checkpoint_dir: str | None = None
    eval_every: int = 1
    record_wall_time: bool = False

    def __post_init__(self):
        if self.batch_size < 3:
            raise ValueError(f"batch_size must be >= 3, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        self.betas = tuple(self.betas)


@dataclass
class EpochLog:
    epoch: int
    train_loss: float | None
    batches: int
    skipped_batches: int
    heldout_pearson: float | None = None
    heldout_spearman: float | None = None
    wall_time: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["wall_time"] is None:
            del d["wall_time"]
        return d


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)

    def append(self, entry: EpochLog) -> None:
        self.epochs.append(entry)

    def __len__(self) -> int:
        return len(self.epochs)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_dict(), sort_keys=True) + "\n" for e in self.epochs)

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "TrainLog":
        log = cls()
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                log.append(EpochLog(**json.loads(line)))
        return log


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def to_tensors(self) -> dict:
        out = {f"adam.m.{k}": a for k, a in self.m.items()}
        out.update({f"adam.v.{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_tensors(cls, t: int, tensors: dict) -> "AdamState":
        m = {k[len("adam.m."):]: a for k, a in tensors.items() if k.startswith("adam.m.")}
        v = {k[len("adam.v."):]: a for k, a in tensors.items() if k.startswith("adam.v.")}
        return cls(m, v, int(t))


def step(params: dict, grads: dict, state: AdamState, lr: float = 1e-3,
         betas: tuple = (0.9, 0.999), eps: float = 1e-8, gdn_layers=()) -> None:
    """One Adam update of ``params`` in place, then clamp the GDN layers."""
    b1, b2 = betas
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape}")
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.m.get(name, np.zeros(p.shape, dtype=np.float32)).astype(np.float64)
        v = state.v.get(name, np.zeros(p.shape, dtype=np.float32)).astype(np.float64)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        # moments are stored at checkpoint precision so a resumed run matches bitwise
        state.m[name], state.v[name] = m.astype(np.float32), v.astype(np.float32)
        m, v = state.m[name].astype(np.float64), state.v[name].astype(np.float64)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data[...] = (p.data.astype(np.float64) - update).astype(p.data.dtype)
    for layer in gdn_layers:
        layer.project()


def loss(model, ref_batch, dist_batch, dissimilarity) -> Tensor:
    """``1 - pearson(model distances, dissimilarity)``; lies in [0, 2]."""
    d = model.pair_distance(_t(ref_batch), _t(dist_batch))
    return 1.0 - pearson(d, np.asarray(dissimilarity, dtype=np.float64))


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def predict_distances(model, source, batch_size: int = 16, crop: int | None = None,
                      cache: ImageCache | None = None) -> np.ndarray:
    """Distances for every pair in ``source`` in manifest order (center crops if ``crop``)."""
    out = np.empty(len(source))
    for b in batches(source, max(batch_size, 3), seed=0, crop=crop, crop_mode="center",
                     shuffle=False, cache=cache):
        out[b.indices] = model.pair_distance(Tensor(b.ref), Tensor(b.dist)).data
    tail = len(source) % max(batch_size, 3)
    if tail and tail < 3:
        # batches() drops a final batch under 3 pairs; score the leftovers one by one
        for i in range(len(source) - tail, len(source)):
            out[i] = _single_distance(model, source, i, crop, cache)
    return out


def _single_distance(model, source, i, crop, cache):
    if isinstance(source, PairArrays):
        r, d = source.ref[i], source.dist[i]
    else:
        cache = cache or ImageCache()
        r, d = cache(source.records[i].ref_path), cache(source.records[i].dist_path)
    if crop is not None:
        h, w = r.shape[-2:]
        top, left = (h - crop) // 2, (w - crop) // 2
        r = r[..., top:top + crop, left:left + crop]
        d = d[..., top:top + crop, left:left + crop]
    return float(model.pair_distance(Tensor(r[None]), Tensor(d[None])).data[0])


def _targets(source) -> np.ndarray:
    if isinstance(source, PairArrays):
        return source.mos if source.mos is not None else -source.dissimilarity
    return source.mos


def heldout_scores(model, source, batch_size: int, crop, cache=None) -> tuple[float, float]:
    d = predict_distances(model, source, batch_size, crop, cache)
    y = _targets(source)
    return abs(evaluator.pearson(d, y)), abs(evaluator.spearman(d, y))


def _dump_batch(cfg: TrainConfig, batch, epoch: int) -> Path | None:
    if cfg.checkpoint_dir is None:
        return None
    path = Path(cfg.checkpoint_dir) / f"nonfinite_epoch{epoch}.npz"
    np.savez(path, ref=batch.ref, dist=batch.dist, dissimilarity=batch.dissimilarity,
             indices=batch.indices)
    return path


def train(model, source, config: TrainConfig, heldout=None, resume: str | Path | None = None):
    """Fit ``model`` to a MOS manifest (or :class:`PairArrays`) and return ``(model, log)``.

    When ``heldout`` is given, it is scored every ``eval_every`` epochs and the
    model with the best held-out |Spearman| (ties broken by |Pearson|) is
    kept; otherwise the final state is returned. With ``checkpoint_dir`` set,
    ``last.pnet``, ``best.pnet`` and ``train_log.jsonl`` are written there
    after every epoch; ``resume`` continues from a ``last.pnet``.
    """
    cfg = config
    ckdir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)
    params = model.parameters()
    state = AdamState()
    log = TrainLog()
    start_epoch = 0
    best_key = None
    best_state = None

    if resume is not None:
        loaded, header, extra = model_io.load_checkpoint(resume)
        if loaded.config_dict() != model.config_dict():
            raise TrainingError("resume checkpoint has a different model config")
        model.load_state_dict(loaded.state_dict())
        meta = header.get("extra", {})
        state = AdamState.from_tensors(meta.get("adam_t", 0),
                                       {k: v for k, v in extra.items() if not k.startswith("best.")})
        start_epoch = int(header.get("epoch", 0))
        if meta.get("best_key") is not None:
            best_key = tuple(meta["best_key"])
            best_state = {k[len("best."):]: v for k, v in extra.items() if k.startswith("best.")}
        if ckdir is not None and (ckdir / "train_log.jsonl").exists():
            log = TrainLog.read(ckdir / "train_log.jsonl")
            log.epochs = log.epochs[:start_epoch]

    cache = ImageCache()
    heldout_cache = ImageCache() if heldout is not None else None
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        losses, skipped = [], 0
        for batch in batches(source, cfg.batch_size, seed=_epoch_seed(cfg.seed, epoch),
                             crop=cfg.crop, crop_mode=cfg.crop_mode, cache=cache):
            model.zero_grad()
            try:
                value = loss(model, batch.ref, batch.dist, batch.dissimilarity)
            except DegenerateBatchError as exc:
                skipped += 1
                logger.warning("epoch %d: skipping batch (%s)", epoch, exc)
                continue
            except NonFiniteError as exc:
                dump = _dump_batch(cfg, batch, epoch)
                raise TrainingError(f"epoch {epoch}: non-finite forward pass ({exc}); "
                                    f"batch indices {batch.indices.tolist()} dumped to {dump}") from exc
            if not np.isfinite(value.item()):
                dump = _dump_batch(cfg, batch, epoch)
                raise TrainingError(f"epoch {epoch}: non-finite loss; batch dumped to {dump}")
            backward(value)
            grads = {k: p.grad for k, p in params.items()}
            step(params, grads, state, cfg.learning_rate, cfg.betas, cfg.eps, model.gdn_layers())
            losses.append(value.item())
        if skipped:
            logger.warning("epoch %d: %d zero-variance batch(es) skipped", epoch, skipped)

        entry = EpochLog(epoch + 1, float(np.mean(losses)) if losses else None,
                         len(losses), skipped)
        if heldout is not None and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs):
            try:
                hp, hs = heldout_scores(model, heldout, cfg.batch_size, cfg.crop, heldout_cache)
            except evaluator.EvaluationError as exc:
                logger.warning("epoch %d: held-out evaluation failed (%s)", epoch + 1, exc)
            else:
                entry.heldout_pearson, entry.heldout_spearman = hp, hs
                key = (round(hs, 12), round(hp, 12))
                if best_key is None or key > best_key:
                    best_key, best_state = key, model.state_dict()
                    if ckdir is not None:
                        model_io.save(model, ckdir / "best.pnet", epoch + 1,
                                      {"heldout_pearson": hp, "heldout_spearman": hs})
        if cfg.record_wall_time:
            entry.wall_time = time.perf_counter() - t0
        log.append(entry)
        logger.info("epoch %d: loss %s heldout pearson %s spearman %s", entry.epoch,
                    entry.train_loss, entry.heldout_pearson, entry.heldout_spearman)
        if ckdir is not None:
            extra_tensors = state.to_tensors()
            if best_state is not None:
                extra_tensors.update({f"best.{k}": v for k, v in best_state.items()})
            model_io.save(model, ckdir / "last.pnet", epoch + 1,
                          {"adam_t": state.t, "best_key": list(best_key) if best_key else None},
                          extra_tensors)
            log.write(ckdir / "train_log.jsonl")

    if best_state is not None:
        model.load_state_dict(best_state)
    if ckdir is not None:
        if best_state is None:
            model_io.save(model, ckdir / "best.pnet", cfg.epochs)
        log.write(ckdir / "train_log.jsonl")
    return model, log


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([seed, epoch]).generate_state(1)[0])
