"""The desk-scale detector: small conv backbone, cross-level resizing,
a configurable fusion stage, and per-level prediction heads.

Two topologies are supported.  The standard one produces three levels at
strides (4, 8, 16) with distinct channel counts and uses the real
rescaling operators between levels.  The identity-resize topology builds
all three levels at the same stride and channel count from a shared stem,
which makes every cross-level "resize" the identity function; the
consistency analyzer relies on that configuration to turn approximate
gradient statements into exact ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .fusion import (
    ConfigError,
    FusionWeights,
    LambdaConvParams,
    compute_fusion_weights,
    fuse,
    fuse_baseline,
    make_concat_params,
)
from .pyramid import NUM_LEVELS, PyramidFeatures, ResizeParams, resize_all

FUSION_MODES = ("asff", "sum", "concat", "ignore")

# the ignore strategy trains on plain summed features; only the targets differ
_FEATURE_MODE = {"asff": "asff", "sum": "sum", "concat": "concat", "ignore": "sum"}

# negative objectness prior keeps the early background flood small
_OBJ_BIAS_INIT = -4.0


@dataclass(frozen=True)
class ModelConfig:
    channels: tuple[int, int, int] = (32, 16, 8)
    strides: tuple[int, int, int] = (4, 8, 16)
    head_channels: int = 16
    fusion_mode: str = "asff"
    identity_resize: bool = False
    in_channels: int = 1

    def __post_init__(self):
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if len(self.channels) != NUM_LEVELS or len(self.strides) != NUM_LEVELS:
            raise ConfigError("exactly three pyramid levels are supported")
        if self.identity_resize:
            if len(set(self.strides)) != 1 or len(set(self.channels)) != 1:
                raise ConfigError("identity_resize requires equal strides and channels at all levels")
        else:
            for a, b in zip(self.strides, self.strides[1:]):
                if b != 2 * a:
                    raise ConfigError(f"strides must double between levels, got {self.strides}")

    def grid(self, image_size: int, level: int) -> tuple[int, int]:
        s = self.strides[level - 1]
        return image_size // s, image_size // s


@dataclass
class ModelOutputs:
    """Everything a forward pass produced, kept for gradient analysis."""

    levels: list[Tensor]
    resized: list[list[Tensor]]          # [source][target]
    fusion_weights: list[FusionWeights | None]
    fused: list[Tensor]
    preds: list[Tensor]


class DetectionModel:
    """Parameter container plus the forward pass."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor],
                 resize_params: ResizeParams | None,
                 lambda_params: LambdaConvParams | None,
                 concat_params: tuple[Tensor, Tensor] | None,
                 dtype=np.float32):
        self.config = config
        self.params = params
        self.resize_params = resize_params
        self.lambda_params = lambda_params
        self.concat_params = concat_params
        self.dtype = dtype

    # -- construction -------------------------------------------------------

    @classmethod
    def build(cls, config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> "DetectionModel":
        params: dict[str, Tensor] = {}

        def conv_param(name: str, cout: int, cin: int, k: int, bias_init: float = 0.0):
            std = float(np.sqrt(2.0 / (cin * k * k)))
            w = ag.randn(rng, (cout, cin, k, k), std=std, dtype=dtype,
                         requires_grad=True, name=f"{name}.w")
            b = ag.zeros((1, cout, 1, 1), dtype=dtype, requires_grad=True, name=f"{name}.b")
            if bias_init:
                b.data[:] = bias_init
            params[w.name] = w
            params[b.name] = b
            return w, b

        c1, c2, c3 = config.channels
        if config.identity_resize:
            conv_param("backbone.stem1", 8, config.in_channels, 3)
            conv_param("backbone.stem2", c1, 8, 3)
            for l in range(1, NUM_LEVELS + 1):
                conv_param(f"backbone.branch{l}", config.channels[l - 1], c1, 3)
        else:
            conv_param("backbone.stem1", 8, config.in_channels, 3)
            conv_param("backbone.level1", c1, 8, 3)
            conv_param("backbone.level2", c2, c1, 3)
            conv_param("backbone.level3", c3, c2, 3)

        resize_params = None
        if not config.identity_resize:
            resize_params = ResizeParams.create(config.channels, rng, dtype=dtype)
            params.update(resize_params.tensors())

        lambda_params = None
        concat_params = None
        feature_mode = _FEATURE_MODE[config.fusion_mode]
        if feature_mode == "asff":
            lambda_params = LambdaConvParams.create(config.channels, dtype=dtype)
            params.update(lambda_params.tensors())
        elif feature_mode == "concat":
            concat_params = []
            for l in range(1, NUM_LEVELS + 1):
                w, b = make_concat_params(config.channels[l - 1], rng, dtype=dtype)
                w.name = f"fusion.concat.l{l}.w"
                b.name = f"fusion.concat.l{l}.b"
                params[w.name] = w
                params[b.name] = b
                concat_params.append((w, b))

        for l in range(1, NUM_LEVELS + 1):
            cl = config.channels[l - 1]
            conv_param(f"head{l}.conv", config.head_channels, cl, 3)
            conv_param(f"head{l}.out", 5, config.head_channels, 1)
            params[f"head{l}.out.b"].data[0, 0] = _OBJ_BIAS_INIT

        return cls(config, params, resize_params, lambda_params, concat_params, dtype)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # -- forward ------------------------------------------------------------

    def _conv_block(self, x: Tensor, name: str, stride: int) -> Tensor:
        w = self.params[f"{name}.w"]
        b = self.params[f"{name}.b"]
        return ag.relu(ag.conv2d(x, w, b, stride=stride, pad=1))

    def backbone(self, images: Tensor) -> list[Tensor]:
        cfg = self.config
        if cfg.identity_resize:
            base = self._conv_block(images, "backbone.stem1", 2)
            base = self._conv_block(base, "backbone.stem2", 2)
            return [self._conv_block(base, f"backbone.branch{l}", 1)
                    for l in range(1, NUM_LEVELS + 1)]
        x = self._conv_block(images, "backbone.stem1", 2)
        x1 = self._conv_block(x, "backbone.level1", 2)
        x2 = self._conv_block(x1, "backbone.level2", 2)
        x3 = self._conv_block(x2, "backbone.level3", 2)
        return [x1, x2, x3]

    def forward(self, images: Tensor, detach_weights: bool = False) -> ModelOutputs:
        """Full pipeline: backbone, cross-level resize, fusion, heads.

        ``detach_weights`` cuts the fusion weights out of the gradient
        graph (ASFF mode only); feature values are unchanged.
        """
        cfg = self.config
        levels = self.backbone(images)
        if cfg.identity_resize:
            resized = [[levels[n] for _ in range(NUM_LEVELS)] for n in range(NUM_LEVELS)]
        else:
            pyramid = resize_all(PyramidFeatures(levels=list(levels)), self.resize_params)
            resized = pyramid.resized

        feature_mode = _FEATURE_MODE[cfg.fusion_mode]
        fusion_weights: list[FusionWeights | None] = []
        fused: list[Tensor] = []
        for l in range(1, NUM_LEVELS + 1):
            sources = [resized[n][l - 1] for n in range(NUM_LEVELS)]
            if feature_mode == "asff":
                weights = compute_fusion_weights(sources, self.lambda_params, l,
                                                 detach_weights=detach_weights)
                fusion_weights.append(weights)
                fused.append(fuse(sources, weights, l))
            elif feature_mode == "sum":
                fusion_weights.append(None)
                fused.append(fuse_baseline(sources, "sum"))
            else:
                fusion_weights.append(None)
                fused.append(fuse_baseline(sources, "concat", self.concat_params[l - 1]))

        preds = []
        for l, y in enumerate(fused, start=1):
            h = self._conv_block(y, f"head{l}.conv", 1)
            preds.append(ag.conv2d(h, self.params[f"head{l}.out.w"],
                                   self.params[f"head{l}.out.b"]))
        return ModelOutputs(levels=levels, resized=resized,
                            fusion_weights=fusion_weights, fused=fused, preds=preds)


def batch_images(scenes, dtype=np.float32) -> Tensor:
    return Tensor(np.stack([s.image for s in scenes]).astype(dtype))
