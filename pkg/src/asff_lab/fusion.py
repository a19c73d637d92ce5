"""Adaptive spatial fusion of resized pyramid features.

For a target level the three resized source maps are combined per
position as ``y_ij = sum_n w_n_ij * x_n_ij``, where the weight triple at
each position is a softmax over control values produced by per-source
1x1 convolutions.  The weights are scalars shared across feature
channels, lie in [0, 1], and sum to one at every position.

The module also carries the two baseline combiners used for comparison
(elementwise sum and channel concatenation followed by a 1x1 conv) and
the adjacent-level ignore-region alternative that zeroes loss weights
instead of learning to filter.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .pyramid import NUM_LEVELS


class ConfigError(ValueError):
    """A run or module configuration is inconsistent or incomplete."""


@dataclass
class FusionWeights:
    """Pre-softmax control maps and the normalized spatial weights.

    Both tensors are (N, 3, H, W); channel ``n`` gates source level
    ``n + 1``.  ``detached`` records whether the weights were cut out of
    the gradient graph (used by the consistency analyzer, which treats
    them as plain coefficients).
    """

    lambda_maps: Tensor
    weights: Tensor
    detached: bool = False


@dataclass
class LambdaConvParams:
    """The 1x1 convolutions that produce control maps from resized features.

    ``convs[(l, n)]`` maps the level-``n`` features resized to level ``l``
    down to a single control channel.  Zero-initialized, which makes the
    initial fusion an exact uniform average and keeps early training
    indistinguishable from mean fusion.
    """

    convs: dict[tuple[int, int], tuple[Tensor, Tensor]] = field(default_factory=dict)

    @classmethod
    def create(cls, channels: tuple[int, int, int], dtype=np.float32) -> "LambdaConvParams":
        params = cls()
        for l in range(1, NUM_LEVELS + 1):
            for n in range(1, NUM_LEVELS + 1):
                params.convs[(l, n)] = (
                    ag.zeros((1, channels[l - 1], 1, 1), dtype=dtype, requires_grad=True,
                             name=f"fusion.lambda.l{l}.src{n}.w"),
                    ag.zeros((1, 1, 1, 1), dtype=dtype, requires_grad=True,
                             name=f"fusion.lambda.l{l}.src{n}.b"),
                )
        return params

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for (w, b) in self.convs.values():
            out[w.name] = w
            out[b.name] = b
        return out


def compute_fusion_weights(resized: list[Tensor], params: LambdaConvParams, l: int,
                           detach_weights: bool = False) -> FusionWeights:
    """Per-position source weights for target level ``l``.

    The three resized maps must share (N, H, W).  With ``detach_weights``
    the returned weights are constants: gradients flow through the fused
    features only, not through the control path.
    """
    if len(resized) != NUM_LEVELS:
        raise ag.DimensionError("compute_fusion_weights", "sources", NUM_LEVELS, len(resized))
    lams = []
    for n, x in enumerate(resized, start=1):
        w, b = params.convs[(l, n)]
        lams.append(ag.conv2d(x, w, b))
    stack = ag.concat_channels(lams)
    weights = ag.softmax_over_sources(stack)
    if detach_weights:
        weights = weights.detach()
    return FusionWeights(lambda_maps=stack, weights=weights, detached=detach_weights)


def fuse(resized: list[Tensor], weights: FusionWeights, l: int) -> Tensor:
    """Adaptively fused features for target level ``l``."""
    return ag.weighted_sum(resized, weights.weights)


def fuse_baseline(resized: list[Tensor], mode: str,
                  concat_params: tuple[Tensor, Tensor] | None = None) -> Tensor:
    """The comparison combiners: elementwise sum, or concat + 1x1 conv."""
    if mode == "sum":
        out = resized[0]
        for x in resized[1:]:
            out = ag.add(out, x)
        return out
    if mode == "concat":
        if concat_params is None:
            raise ConfigError("concat fusion requires the channel-restoring 1x1 conv parameters")
        w, b = concat_params
        return ag.conv2d(ag.concat_channels(resized), w, b)
    raise ConfigError(f"unknown baseline fusion mode {mode!r}")


def make_concat_params(c_out: int, rng: np.random.Generator, dtype=np.float32) -> tuple[Tensor, Tensor]:
    """He-initialized 1x1 conv mapping 3*c_out concatenated channels back to c_out."""
    std = float(np.sqrt(2.0 / (3 * c_out)))
    return (
        ag.randn(rng, (c_out, 3 * c_out, 1, 1), std=std, dtype=dtype,
                 requires_grad=True, name="fusion.concat.w"),
        ag.zeros((1, c_out, 1, 1), dtype=dtype, requires_grad=True, name="fusion.concat.b"),
    )


# ---------------------------------------------------------------------------
# Adjacent-level ignore regions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IgnoreConfig:
    """How much adjacent-level area around each object loses supervision.

    ``epsilon_ignore`` is the width/length ratio of the ignored area to
    the object's own box; ``area`` mode zeroes every adjacent-level cell
    whose center falls inside that scaled box, ``center_only`` zeroes the
    single cell containing the object center.  ``area`` with epsilon 0 is
    a documented no-op.
    """

    epsilon_ignore: float = 0.0
    mode: str = "off"

    def __post_init__(self):
        if self.mode not in ("off", "center_only", "area"):
            raise ConfigError(f"ignore mode must be off/center_only/area, got {self.mode!r}")
        if not 0.0 <= self.epsilon_ignore <= 1.0:
            raise ConfigError(f"epsilon_ignore must be in [0, 1], got {self.epsilon_ignore}")


def _cells_in_scaled_box(box, eps: float, stride: int, grid_h: int, grid_w: int):
    """Grid cells whose centers lie inside the box scaled by ``eps``."""
    x1, y1, x2, y2 = box
    cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
    half_w, half_h = eps * (x2 - x1) / 2.0, eps * (y2 - y1) / 2.0
    cells = []
    for i in range(grid_h):
        for j in range(grid_w):
            px, py = (j + 0.5) * stride, (i + 0.5) * stride
            if cx - half_w <= px <= cx + half_w and cy - half_h <= py <= cy + half_h:
                cells.append((i, j))
    return cells


def _center_cell(box, stride: int, grid_h: int, grid_w: int):
    x1, y1, x2, y2 = box
    j = min(int((x1 + x2) / 2.0 // stride), grid_w - 1)
    i = min(int((y1 + y2) / 2.0 // stride), grid_h - 1)
    return i, j


def apply_ignore_mask(targets, assignments, cfg: IgnoreConfig, scene_index: int = 0):
    """Zero adjacent-level loss weights around each assigned object.

    ``targets`` is the per-level target list (anything with ``loss_weight``
    (N,1,H,W) arrays and a ``stride``); ``assignments`` pairs each object's
    pixel box with its assigned level.  The assigned level's own targets
    are never modified.  Returns new target objects; the inputs are left
    untouched.
    """
    if cfg.mode == "off" or (cfg.mode == "area" and cfg.epsilon_ignore == 0.0):
        return targets
    masked = [replace(t, loss_weight=t.loss_weight.copy()) for t in targets]
    for box, level in assignments:
        for adjacent in (level - 1, level + 1):
            if not 1 <= adjacent <= len(masked):
                continue
            t = masked[adjacent - 1]
            grid_h, grid_w = t.loss_weight.shape[2:]
            if cfg.mode == "center_only":
                cells = [_center_cell(box, t.stride, grid_h, grid_w)]
            else:
                cells = _cells_in_scaled_box(box, cfg.epsilon_ignore, t.stride, grid_h, grid_w)
            for i, j in cells:
                t.loss_weight[scene_index, 0, i, j] = 0.0
    return masked
