"""The PerceptNet model, a cascade of divisive normalizations and convolutions.

Stage order, following the early visual pathway::

    gdn1 (per-channel, RGB saturation)
    conv1 1x1 3->3 (opponent colour transform)  -> maxpool
    gdn2 (chromatic adaptation)
    conv2 5x5 3->6 (center-surround)            -> maxpool
    gdn3 (LGN normalization)
    conv3 5x5 6->128 (oriented multiscale filters)
    gdn4 (V1 normalization)
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from . import checkpoint as ckpt
from .tensor import GdnParams, Tensor, conv2d, gdn, l2_feature_distance, maxpool2

PARAMETER_BUDGET = 36368


@dataclass(frozen=True)
class PerceptNetConfig:
    channels: tuple = (3, 3, 6, 128)
    kernel_sizes: tuple = (1, 5, 5)
    downsample_after: tuple = ("conv1", "conv2")
    padding_mode: str = "mirror-same"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        object.__setattr__(self, "downsample_after", tuple(self.downsample_after))
        if len(self.channels) != 4 or len(self.kernel_sizes) != 3:
            raise ValueError("PerceptNet needs 4 channel widths and 3 kernel sizes")
        if self.channels[0] != 3:
            raise ValueError("PerceptNet input must be RGB (3 channels)")
        if any(k % 2 == 0 or k < 1 for k in self.kernel_sizes):
            raise ValueError(f"kernel sizes must be odd and positive: {self.kernel_sizes}")
        unknown = set(self.downsample_after) - {"conv1", "conv2", "conv3"}
        if unknown:
            raise ValueError(f"unknown downsampling stages: {sorted(unknown)}")
        if self.padding_mode not in ("mirror-same", "valid"):
            raise ValueError(f"unknown padding mode {self.padding_mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = "perceptnet"
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PerceptNetConfig":
        d = {k: v for k, v in d.items() if k != "model"}
        return cls(**d)

    @property
    def downsample_factor(self) -> int:
        return 2 ** len(self.downsample_after)


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Conv:
    weight: Tensor
    bias: Tensor


class PerceptNet:
    """The perceptual transform f(x); see module docstring for the stage layout."""

    kind = "perceptnet"

    def __init__(self, config: PerceptNetConfig | None = None, seed: int = 0):
        self.config = config or PerceptNetConfig()
        self.seed = int(seed)
        c0, c1, c2, c3 = self.config.channels
        k1, k2, k3 = self.config.kernel_sizes
        rng = np.random.default_rng(self.seed)
        self.gdn1 = GdnParams.create(c0, diagonal_only=True)
        self.conv1 = _glorot_conv(rng, c0, c1, k1)
        self.gdn2 = GdnParams.create(c1)
        self.conv2 = _glorot_conv(rng, c1, c2, k2)
        self.gdn3 = GdnParams.create(c2)
        self.conv3 = _glorot_conv(rng, c2, c3, k3)
        self.gdn4 = GdnParams.create(c3)

    @property
    def out_channels(self) -> int:
        return self.config.channels[-1]

    def stages(self) -> Iterator[tuple[str, object]]:
        for name in ("gdn1", "conv1", "gdn2", "conv2", "gdn3", "conv3", "gdn4"):
            yield name, getattr(self, name)

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        for name, stage in self.stages():
            if isinstance(stage, GdnParams):
                params[f"{name}.beta"] = stage.beta
                params[f"{name}.gamma"] = stage.gamma
            else:
                params[f"{name}.weight"] = stage.weight
                params[f"{name}.bias"] = stage.bias
        return params

    def gdn_layers(self) -> list[GdnParams]:
        return [s for _, s in self.stages() if isinstance(s, GdnParams)]

    def project(self) -> None:
        for layer in self.gdn_layers():
            layer.project()

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def forward(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected an n x 3 x h x w batch, got shape {x.shape}")
        f = self.config.downsample_factor
        if x.shape[2] % f or x.shape[3] % f:
            raise ValueError(f"image size {x.shape[2]}x{x.shape[3]} not divisible by {f}")
        pad = self.config.padding_mode
        y = gdn(x, self.gdn1)
        for conv_name, gdn_name in (("conv1", "gdn2"), ("conv2", "gdn3"), ("conv3", "gdn4")):
            conv = getattr(self, conv_name)
            y = conv2d(y, conv.weight, conv.bias, padding=pad)
            if conv_name in self.config.downsample_after:
                y = maxpool2(y)
            y = gdn(y, getattr(self, gdn_name))
        return y

    __call__ = forward

    def pair_distance(self, ref, dist) -> Tensor:
        """l2 distance between the representations of each reference/distorted pair."""
        return l2_feature_distance(self.forward(ref), self.forward(dist))

    def config_dict(self) -> dict:
        return self.config.to_dict()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        _load_state(self, state)


def _glorot_conv(rng: np.random.Generator, cin: int, cout: int, k: int) -> Conv:
    limit = np.sqrt(6.0 / (cin * k * k + cout * k * k))
    w = rng.uniform(-limit, limit, size=(cout, cin, k, k))
    return Conv(Tensor(w, requires_grad=True), Tensor(np.zeros(cout), requires_grad=True))


def _load_state(model, state: dict[str, np.ndarray]) -> None:
    params = model.parameters()
    missing = set(params) - set(state)
    if missing:
        raise ckpt.ShapeMismatchError(f"checkpoint lacks tensors: {sorted(missing)}")
    for name, p in params.items():
        arr = state[name]
        if arr.shape != p.shape:
            raise ckpt.ShapeMismatchError(
                f"tensor {name!r} has shape {arr.shape}, config expects {p.shape}")
    for name, p in params.items():
        p.data[...] = state[name]


def init(config: PerceptNetConfig | None = None, seed: int = 0) -> PerceptNet:
    """Freshly initialized PerceptNet: Glorot-uniform convs, zero biases, beta=1, gamma=0.1*I."""
    return PerceptNet(config, seed)


def count_parameters(model) -> int:
    return int(sum(p.data.size for p in model.parameters().values()))


def save(model, path, epoch: int = 0, extra_meta: dict | None = None,
         extra_tensors: dict[str, np.ndarray] | None = None) -> None:
    """Write ``model`` (and optionally optimizer state) to a checkpoint file."""
    config = model.config_dict()
    meta = {"config": config, "config_hash": config_hash(config),
            "seed": int(model.seed), "epoch": int(epoch)}
    if extra_meta:
        meta["extra"] = extra_meta
    tensors = model.state_dict()
    if extra_tensors:
        tensors.update(extra_tensors)
    ckpt.write_container(path, meta, tensors)


def load_checkpoint(path):
    """Return ``(model, header, leftover_tensors)``; leftovers hold e.g. optimizer moments."""
    header, tensors = ckpt.read_container(path)
    try:
        config = header["config"]
        kind = config.get("model", "perceptnet")
    except (KeyError, AttributeError):
        raise ckpt.CorruptCheckpointError(f"{path}: header lacks a model config") from None
    if header.get("config_hash") not in (None, config_hash(config)):
        raise ckpt.CorruptCheckpointError(f"{path}: config hash mismatch")
    if kind == "perceptnet":
        try:
            model = PerceptNet(PerceptNetConfig.from_dict(config), header.get("seed", 0))
        except (TypeError, ValueError) as exc:
            raise ckpt.CorruptCheckpointError(f"{path}: bad config ({exc})") from None
    elif kind == "nlapd-gdn":
        from .baselines import NlapdGdnModel
        model = NlapdGdnModel(levels=int(config["levels"]), seed=header.get("seed", 0))
    else:
        raise ckpt.CorruptCheckpointError(f"{path}: unknown model kind {kind!r}")
    names = set(model.parameters())
    model.load_state_dict({k: v for k, v in tensors.items() if k in names})
    for layer in model.gdn_layers():
        try:
            layer.check()
        except ValueError as exc:
            raise ckpt.CorruptCheckpointError(f"{path}: {exc}") from None
    leftovers = {k: v for k, v in tensors.items() if k not in names}
    return model, header, leftovers


def load(path):
    return load_checkpoint(path)[0]
