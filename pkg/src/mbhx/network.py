"""Encoder / dual-decoder network predicting an alpha matte and a foreground.

Layout at ``base_channels = c`` (extents for an H×W input)::

    entry      3x3 conv stride 2, relu                       c   @ H/2
    block1-3   sep, relu, sep, relu, sep stride 2            2c  @ H/4
                                                             4c  @ H/8
                                                             8c  @ H/16
    decoder    x4 upsample, concat skip (4c @ H/4),  sep, relu -> 4c
               x2 upsample, concat skip (2c @ H/2),  sep, relu -> 2c
               x2 upsample, concat input image (3 @ H), sep, relu -> c
               3x3 head conv at full resolution, sigmoid -> 1 or 3 channels

Skips are each block's last activation before its stride-2 convolution.
With ``share_encoder=False`` the foreground decoder reads a second encoder
that is initialized identically to the first.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError

ENCODER_BLOCKS = 3


@dataclass(frozen=True)
class ModelConfig:
    share_encoder: bool = True
    use_perceptual: bool = True
    base_channels: int = 16
    input_extent: tuple[int, int] = (64, 64)

    def __post_init__(self):
        h, w = self.input_extent
        if self.base_channels < 1:
            raise ConfigError("base_channels must be positive")
        if h < 16 or w < 16 or h % 16 or w % 16:
            raise ConfigError(f"input extent {h}x{w} must be divisible by 16")
        object.__setattr__(self, "input_extent", (int(h), int(w)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_extent"] = list(self.input_extent)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(bool(d["share_encoder"]), bool(d["use_perceptual"]), int(d["base_channels"]),
                   tuple(d["input_extent"]))


# ablation numbering: model id -> (share_encoder, use_perceptual)
MODEL_GRID = {1: (False, False), 2: (True, False), 3: (False, True), 4: (True, True)}


def model_config(model_id: int, base_channels: int = 16, input_extent=(64, 64)) -> ModelConfig:
    if model_id not in MODEL_GRID:
        raise ConfigError(f"model id must be 1-4, got {model_id}")
    se, pl = MODEL_GRID[model_id]
    return ModelConfig(se, pl, base_channels, tuple(input_extent))


# ---------------------------------------------------------------------------
# parameter layout


def _sep_shapes(prefix: str, cin: int, cout: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{prefix}.dw", (cin, 3, 3)), (f"{prefix}.pw", (cout, cin, 1, 1)), (f"{prefix}.b", (cout,))]


def _conv_shapes(prefix: str, cin: int, cout: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{prefix}.w", (cout, cin, 3, 3)), (f"{prefix}.b", (cout,))]


def encoder_shapes(c: int, prefix: str = "enc") -> list[tuple[str, tuple[int, ...]]]:
    shapes = _conv_shapes(f"{prefix}.entry", 3, c)
    cin = c
    for i in range(1, ENCODER_BLOCKS + 1):
        cout = c * 2 ** i
        shapes += _sep_shapes(f"{prefix}.block{i}.sep1", cin, cout)
        shapes += _sep_shapes(f"{prefix}.block{i}.sep2", cout, cout)
        shapes += _sep_shapes(f"{prefix}.block{i}.down", cout, cout)
        cin = cout
    return shapes


def decoder_shapes(c: int, out_channels: int, prefix: str) -> list[tuple[str, tuple[int, ...]]]:
    shapes = _sep_shapes(f"{prefix}.up1", 8 * c + 4 * c, 4 * c)
    shapes += _sep_shapes(f"{prefix}.up2", 4 * c + 2 * c, 2 * c)
    shapes += _sep_shapes(f"{prefix}.up3", 2 * c + 3, c)
    shapes += _conv_shapes(f"{prefix}.head", c, out_channels)
    return shapes


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    c = config.base_channels
    shapes = encoder_shapes(c, "enc")
    if not config.share_encoder:
        shapes += encoder_shapes(c, "fg_enc")
    shapes += decoder_shapes(c, 1, "dec_alpha")
    shapes += decoder_shapes(c, 3, "dec_fg")
    return shapes


@dataclass
class NetworkWeights:
    """Named learnable tensors of one model, in a fixed order."""

    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def __iter__(self) -> Iterator[Tensor]:
        return iter(self.params.values())

    def encoder(self, branch: str) -> dict[str, Tensor]:
        """Encoder parameters read by ``branch`` ('alpha' or 'fg'), keyed without prefix.

        With a shared encoder both branches get the very same Tensor objects.
        """
        prefix = "fg_enc." if branch == "fg" and not self.config.share_encoder else "enc."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    @classmethod
    def from_arrays(cls, config: ModelConfig, arrays: dict[str, np.ndarray]) -> "NetworkWeights":
        expected = parameter_shapes(config)
        if [(k, tuple(v.shape)) for k, v in arrays.items()] != expected:
            raise ConfigError("parameter names/shapes do not match the model configuration")
        return cls(config, {k: Tensor(np.array(v), requires_grad=True, name=k) for k, v in arrays.items()})

    def astype(self, dtype) -> "NetworkWeights":
        return NetworkWeights.from_arrays(self.config, {k: v.data.astype(dtype) for k, v in self.params.items()})

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def parameter_count(weights: NetworkWeights) -> int:
    return int(sum(p.data.size for p in weights.params.values()))


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if name.endswith(".dw"):
        return shape[1] * shape[2]
    return int(np.prod(shape[1:]))


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # the second encoder draws from the first encoder's streams so both start identical
    if name.startswith("fg_enc."):
        name = "enc." + name[len("fg_enc."):]
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])


def init_gain(name: str) -> float:
    """Variance gain of a kernel: 2 ahead of a relu, 1 for depthwise kernels.

    A depthwise kernel feeds its pointwise partner linearly, so giving it the
    relu gain as well would double the activation variance at every separable
    conv and saturate the sigmoid heads of a freshly initialized network.
    """
    return 1.0 if name.endswith(".dw") else 2.0


def init_weights(config: ModelConfig, seed: int, dtype=np.float32) -> NetworkWeights:
    """He-normal kernels (std sqrt(gain / fan_in)), zero biases; deterministic in ``seed``."""
    arrays = {}
    for name, shape in parameter_shapes(config):
        if name.endswith(".b"):
            arrays[name] = np.zeros(shape, dtype=dtype)
        else:
            std = np.sqrt(init_gain(name) / _fan_in(name, shape))
            arrays[name] = (_param_rng(seed, name).standard_normal(shape) * std).astype(dtype)
    return NetworkWeights.from_arrays(config, arrays)


# ---------------------------------------------------------------------------
# forward pass


def _sep(x: Tensor, p: dict[str, Tensor], name: str, stride: int = 1) -> Tensor:
    return ad.separable_conv2d(x, p[f"{name}.dw"], p[f"{name}.pw"], p[f"{name}.b"], stride=stride)


def encode(p: dict[str, Tensor], image: Tensor, probes: dict | None = None):
    """Return ``(features at H/16, skip at H/4, skip at H/2)``."""
    x = ad.relu(ad.conv2d(image, p["entry.w"], p["entry.b"], stride=2))
    if probes is not None:
        probes["enc_1/2"] = x.shape
    skips = []
    for i in range(1, ENCODER_BLOCKS + 1):
        x = ad.relu(_sep(x, p, f"block{i}.sep1"))
        x = ad.relu(_sep(x, p, f"block{i}.sep2"))
        skips.append(x)
        x = _sep(x, p, f"block{i}.down", stride=2)
        if probes is not None:
            probes[f"enc_1/{2 ** (i + 1)}"] = x.shape
    return x, skips[1], skips[0]


def decode(p: dict[str, Tensor], prefix: str, deep: Tensor, skip4: Tensor, skip2: Tensor,
           image: Tensor, probes: dict | None = None) -> Tensor:
    x = ad.upsample_bilinear(deep, 4)
    x = ad.relu(_sep(ad.concat_channels(x, skip4), p, f"{prefix}.up1"))
    if probes is not None:
        probes[f"{prefix}_1/4"] = x.shape
    x = ad.upsample_bilinear(x, 2)
    x = ad.relu(_sep(ad.concat_channels(x, skip2), p, f"{prefix}.up2"))
    if probes is not None:
        probes[f"{prefix}_1/2"] = x.shape
    x = ad.upsample_bilinear(x, 2)
    x = ad.relu(_sep(ad.concat_channels(x, image), p, f"{prefix}.up3"))
    if probes is not None:
        probes[f"{prefix}_1/1"] = x.shape
    return ad.sigmoid(ad.conv2d(x, p[f"{prefix}.head.w"], p[f"{prefix}.head.b"]))


def forward(weights: NetworkWeights, config: ModelConfig, image, probes: dict | None = None):
    """Predict ``(alpha (B,1,H,W), foreground (B,3,H,W))`` for an image batch (B,3,H,W).

    ``probes``, if given, receives the shape of every intermediate stage.
    """
    if not isinstance(image, Tensor):
        image = Tensor(image)
    if image.data.ndim != 4 or image.shape[1] != 3:
        raise ConfigError(f"expected an image batch of shape (B,3,H,W), got {image.shape}")
    h, w = image.shape[2:]
    if h % 16 or w % 16:
        raise ConfigError(f"image extent {h}x{w} is not divisible by 16; pad or crop it first")
    p = weights.params
    deep, skip4, skip2 = encode(weights.encoder("alpha"), image, probes)
    alpha = decode(p, "dec_alpha", deep, skip4, skip2, image, probes)
    if not config.share_encoder:
        probes_fg = {} if probes is not None else None
        deep, skip4, skip2 = encode(weights.encoder("fg"), image, probes_fg)
        if probes is not None:
            probes.update({f"fg_{k}": v for k, v in probes_fg.items()})
    fg = decode(p, "dec_fg", deep, skip4, skip2, image, probes)
    return alpha, fg
