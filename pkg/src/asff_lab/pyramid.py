"""Rescaling rules that bring features from one pyramid level to another.

Level indexing convention, used everywhere in this package: **level 1 is
the highest resolution** and each step up the pyramid halves the spatial
size, so level ``l`` is ``2**(l-1)`` times coarser than level 1.  Levels
may have different channel counts.

The rescaling rules are:

* same level: the input tensor is returned as-is (no copy);
* source coarser than target: a 1x1 convolution first maps the channel
  count to the target's, then bilinear upsampling by the resolution ratio
  (a single x4 call for two-level gaps, not two x2 calls);
* source finer by one level: a single 3x3 stride-2 convolution changes
  channels and resolution together;
* source finer by two levels: 2x2 max pooling first, then the same 3x3
  stride-2 convolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import DimensionError, Tensor

NUM_LEVELS = 3


@dataclass
class PyramidFeatures:
    """The three per-level maps plus, once computed, their resized versions.

    ``resized[n - 1][l - 1]`` holds the source-``n`` features brought to
    level ``l``'s shape; the diagonal entries are the original tensors.
    """

    levels: list[Tensor]
    resized: list[list[Tensor]] | None = None

    def __post_init__(self):
        if len(self.levels) != NUM_LEVELS:
            raise ValueError(f"expected {NUM_LEVELS} pyramid levels, got {len(self.levels)}")
        for idx in range(1, NUM_LEVELS):
            prev, cur = self.levels[idx - 1], self.levels[idx]
            if prev.shape[2] != 2 * cur.shape[2] or prev.shape[3] != 2 * cur.shape[3]:
                raise DimensionError("pyramid", "H", f"2x level {idx + 1}", prev.shape[2:])


@dataclass
class ResizeParams:
    """Learnable parameters of every cross-level rescaling path.

    ``compress[(n, l)]`` holds the 1x1 conv (weight, bias) used on the up
    paths, ``downsample[(n, l)]`` the 3x3 stride-2 conv used on the down
    paths.  All of them are ordinary trainable tensors.
    """

    compress: dict[tuple[int, int], tuple[Tensor, Tensor]] = field(default_factory=dict)
    downsample: dict[tuple[int, int], tuple[Tensor, Tensor]] = field(default_factory=dict)

    @classmethod
    def create(cls, channels: tuple[int, int, int], rng: np.random.Generator,
               dtype=np.float32) -> "ResizeParams":
        """He-initialized conv weights for every (source, target) pair."""
        params = cls()
        for n in range(1, NUM_LEVELS + 1):
            for l in range(1, NUM_LEVELS + 1):
                if n == l:
                    continue
                c_src, c_dst = channels[n - 1], channels[l - 1]
                if n > l:  # coarser source: channel compression before upsample
                    std = float(np.sqrt(2.0 / c_src))
                    params.compress[(n, l)] = (
                        ag.randn(rng, (c_dst, c_src, 1, 1), std=std, dtype=dtype,
                                 requires_grad=True, name=f"resize.compress.{n}to{l}.w"),
                        ag.zeros((1, c_dst, 1, 1), dtype=dtype, requires_grad=True,
                                 name=f"resize.compress.{n}to{l}.b"),
                    )
                else:  # finer source: strided conv (shared by the 1/2 and 1/4 paths)
                    std = float(np.sqrt(2.0 / (c_src * 9)))
                    params.downsample[(n, l)] = (
                        ag.randn(rng, (c_dst, c_src, 3, 3), std=std, dtype=dtype,
                                 requires_grad=True, name=f"resize.down.{n}to{l}.w"),
                        ag.zeros((1, c_dst, 1, 1), dtype=dtype, requires_grad=True,
                                 name=f"resize.down.{n}to{l}.b"),
                    )
        return params

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for table in (self.compress, self.downsample):
            for (w, b) in table.values():
                out[w.name] = w
                out[b.name] = b
        return out


def _check_level_shape(x: Tensor, n: int, base_hw: tuple[int, int] | None) -> None:
    if base_hw is None:
        return
    expect = (base_hw[0] // 2 ** (n - 1), base_hw[1] // 2 ** (n - 1))
    if x.shape[2:] != expect:
        raise DimensionError(f"resize_to_level(level {n})", "H", expect, x.shape[2:])


def resize_to_level(x_n: Tensor, n: int, l: int, params: ResizeParams,
                    base_hw: tuple[int, int] | None = None) -> Tensor:
    """Bring level-``n`` features to level ``l``'s shape and channel count.

    ``base_hw`` optionally pins the level-1 spatial size so inconsistent
    inputs are rejected instead of silently resized.
    """
    if not (1 <= n <= NUM_LEVELS and 1 <= l <= NUM_LEVELS):
        raise ValueError(f"levels must be in 1..{NUM_LEVELS}, got n={n}, l={l}")
    _check_level_shape(x_n, n, base_hw)
    if n == l:
        return x_n
    if n > l:
        w, b = params.compress[(n, l)]
        compressed = ag.conv2d(x_n, w, b)
        return ag.interpolate_bilinear(compressed, 2 ** (n - l))
    w, b = params.downsample[(n, l)]
    if l - n == 2:
        x_n = ag.maxpool2(x_n)
    return ag.conv2d(x_n, w, b, stride=2, pad=1)


def resize_all(pyramid: PyramidFeatures, params: ResizeParams) -> PyramidFeatures:
    """Populate ``resized`` with every x_n brought to every level's shape."""
    base_hw = pyramid.levels[0].shape[2:]
    resized = [
        [resize_to_level(pyramid.levels[n - 1], n, l, params, base_hw)
         for l in range(1, NUM_LEVELS + 1)]
        for n in range(1, NUM_LEVELS + 1)
    ]
    pyramid.resized = resized
    return pyramid


def sources_for_level(pyramid: PyramidFeatures, l: int) -> list[Tensor]:
    """The three resized maps feeding target level ``l``, in source order."""
    if pyramid.resized is None:
        raise ValueError("call resize_all before requesting per-level sources")
    return [pyramid.resized[n][l - 1] for n in range(NUM_LEVELS)]
