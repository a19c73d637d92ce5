"""Cross-level gradient decomposition and conflict measurement.

The gradient of the loss with respect to the unresized level-1 features
splits into one contribution per output level: seed the backward walk at
a single fused map y_l with dL/dy_l and read what arrives at x1.  The sum
of the three seeded contributions equals the full gradient, because every
path from x1 to the loss passes through exactly one fused map.

Two statements about that decomposition become exact in the
identity-resize test configuration (equal strides and channels, so every
cross-level resize is the identity):

* with sum fusion, the three head gradients add up to the full gradient;
* with adaptive fusion and the weights treated as constants, the full
  gradient is the weight-scaled sum of the head gradients.

With real resizing those statements are only approximate; this module
never asserts them there and instead reports the residuals: the part
carried by the control-map (lambda) path, and, when channel counts agree,
the deviation of the weighted head-gradient sum caused by resize
Jacobians.

The conflict metric is artifact-defined: 1 - |sum of contributions| /
sum of |contributions| with L2 norms over channels, i.e. the fraction of
gradient magnitude lost to cross-level cancellation at a position.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Graph, Tensor
from .fusion import ConfigError
from .model import DetectionModel
from .pyramid import NUM_LEVELS
from .synthetic import TargetMaps, detection_loss

ANALYZER_MODES = ("sum", "concat", "asff", "asff_detached")

CSV_COLUMNS = ("position_i", "position_j", "g1_norm", "g2_norm", "g3_norm",
               "total_norm", "conflict", "w1", "w2", "w3")


@dataclass
class BatchDecomposition:
    """Per-level contribution maps to dL/dx1 for a whole batch.

    ``contributions[l-1]`` has x1's shape and holds the gradient that
    arrives at x1 through fused level ``l`` only; ``total`` is the full
    backward result.  ``weight_maps[l-1]`` is the level-l fusion weight
    of source 1 (None for non-adaptive modes); ``head_grads[l-1]`` is
    dL/dy_l.  ``lambda_path`` is total minus the detached-weight
    contributions (zero when the mode already treats weights as
    constants).
    """

    mode: str
    identity_resize: bool
    contributions: list[np.ndarray]
    total: np.ndarray
    head_grads: list[np.ndarray]
    weight_maps: list[np.ndarray | None]
    lambda_path: np.ndarray | None
    strides: tuple[int, int, int]


@dataclass
class GradientDecomposition:
    """The decomposition at one level-1 position of one batch element."""

    position: tuple[int, int]
    contributions: list[np.ndarray]      # channel vectors, one per level
    total: np.ndarray
    weights_at_position: list[float] | None
    eq6_prediction: np.ndarray | None    # only when channel counts agree
    lambda_residual: np.ndarray | None
    resize_residual: np.ndarray | None


@dataclass
class ConflictReport:
    mean_conflict: float
    per_position_conflict: np.ndarray    # (N, H1, W1)
    positives_mask: np.ndarray           # (N, H1, W1) bool


def _zero_graph_grads(loss: Tensor) -> None:
    for t in Graph.trace(loss).tensors():
        t.grad = None


def _seeded_contribution(loss: Tensor, y_l: Tensor, seed: np.ndarray, x1: Tensor) -> np.ndarray:
    _zero_graph_grads(loss)
    ag.backward(y_l, seed=seed)
    return np.zeros_like(x1.data) if x1.grad is None else x1.grad.copy()


def _validate_mode(model: DetectionModel, mode: str, resize: str) -> bool:
    if mode not in ANALYZER_MODES:
        raise ConfigError(f"mode must be one of {ANALYZER_MODES}, got {mode!r}")
    if resize not in ("real", "identity"):
        raise ConfigError(f"resize must be 'real' or 'identity', got {resize!r}")
    if (resize == "identity") != model.config.identity_resize:
        raise ConfigError("requested resize mode does not match the model topology")
    feature = "asff" if mode.startswith("asff") else mode
    model_feature = "sum" if model.config.fusion_mode == "ignore" else model.config.fusion_mode
    if feature != model_feature:
        raise ConfigError(
            f"requested mode {mode!r} but the model was built with {model.config.fusion_mode!r}")
    return mode == "asff_detached"


def decompose_batch(model: DetectionModel, images: Tensor, targets: list[TargetMaps],
                    mode: str, resize: str, lambda_box: float = 2.0) -> BatchDecomposition:
    """Seeded-backward decomposition of dL/dx1 over the whole batch."""
    detached = _validate_mode(model, mode, resize)
    outputs = model.forward(images, detach_weights=detached)
    loss = detection_loss(outputs.preds, targets, lambda_box=lambda_box)
    ag.backward(loss)
    x1 = outputs.levels[0]
    total = np.zeros_like(x1.data) if x1.grad is None else x1.grad.copy()
    head_grads = [y.grad.copy() for y in outputs.fused]

    contributions = [
        _seeded_contribution(loss, y_l, head_grads[l_idx], x1)
        for l_idx, y_l in enumerate(outputs.fused)
    ]

    weight_maps: list[np.ndarray | None] = []
    for fw in outputs.fusion_weights:
        weight_maps.append(None if fw is None else fw.weights.data[:, 0].copy())

    lambda_path = None
    if mode == "asff":
        detached_out = model.forward(images, detach_weights=True)
        detached_loss = detection_loss(detached_out.preds, targets, lambda_box=lambda_box)
        ag.backward(detached_loss)
        x1_detached = detached_out.levels[0]
        # snapshot the head gradients first: each seeded pass zeroes the graph
        detached_heads = [np.zeros_like(y.data) if y.grad is None else y.grad.copy()
                          for y in detached_out.fused]
        feature_total = sum(
            _seeded_contribution(detached_loss, y_l, seed, x1_detached)
            for y_l, seed in zip(detached_out.fused, detached_heads))
        lambda_path = total - feature_total

    return BatchDecomposition(
        mode=mode, identity_resize=model.config.identity_resize,
        contributions=contributions, total=total, head_grads=head_grads,
        weight_maps=weight_maps, lambda_path=lambda_path,
        strides=tuple(model.config.strides))


def decompose_gradient(model: DetectionModel, images: Tensor, targets: list[TargetMaps],
                       position: tuple[int, int], mode: str, resize: str,
                       batch_index: int = 0, lambda_box: float = 2.0) -> GradientDecomposition:
    """The per-level gradient decomposition at one level-1 position."""
    batch = decompose_batch(model, images, targets, mode, resize, lambda_box=lambda_box)
    return extract_position(batch, position, batch_index=batch_index)


def extract_position(batch: BatchDecomposition, position: tuple[int, int],
                     batch_index: int = 0) -> GradientDecomposition:
    i, j = position
    h1, w1 = batch.total.shape[2:]
    if not (0 <= i < h1 and 0 <= j < w1):
        raise IndexError(f"position {position} outside the level-1 map {h1}x{w1}")

    ratios = [s // batch.strides[0] for s in batch.strides]
    contributions = [g[batch_index, :, i, j].copy() for g in batch.contributions]
    total = batch.total[batch_index, :, i, j].copy()

    weights = None
    if all(w is not None for w in batch.weight_maps):
        weights = [float(batch.weight_maps[l][batch_index, i // ratios[l], j // ratios[l]])
                   for l in range(NUM_LEVELS)]

    eq6 = None
    resize_residual = None
    channel_counts = {g.shape[1] for g in batch.head_grads}
    if weights is not None and len(channel_counts) == 1 and \
            batch.head_grads[0].shape[1] == batch.total.shape[1]:
        eq6 = sum(
            weights[l] * batch.head_grads[l][batch_index, :, i // ratios[l], j // ratios[l]]
            for l in range(NUM_LEVELS))
        feature_sum = sum(contributions)
        if batch.lambda_path is not None:
            feature_sum = feature_sum - batch.lambda_path[batch_index, :, i, j]
        resize_residual = feature_sum - eq6

    lambda_residual = None
    if batch.lambda_path is not None:
        lambda_residual = batch.lambda_path[batch_index, :, i, j].copy()
    elif batch.mode == "asff_detached":
        lambda_residual = np.zeros_like(total)

    return GradientDecomposition(
        position=position, contributions=contributions, total=total,
        weights_at_position=weights, eq6_prediction=eq6,
        lambda_residual=lambda_residual, resize_residual=resize_residual)


def conflict_metric(decomp: GradientDecomposition) -> float:
    """Cancellation ratio of the per-level contributions at one position."""
    return _conflict_from_vectors(decomp.contributions)


def _conflict_from_vectors(contributions) -> float:
    norms = [float(np.linalg.norm(g)) for g in contributions]
    denom = sum(norms)
    if denom == 0.0 or sum(n > 0.0 for n in norms) < 2:
        return 0.0
    aligned = float(np.linalg.norm(sum(contributions)))
    return float(np.clip(1.0 - aligned / denom, 0.0, 1.0))


def conflict_map(batch: BatchDecomposition) -> np.ndarray:
    """Per-position conflict over the level-1 grid, vectorized."""
    stacked = np.stack(batch.contributions)                # (3, N, C, H, W)
    norms = np.sqrt((stacked.astype(np.float64) ** 2).sum(axis=2))   # (3, N, H, W)
    denom = norms.sum(axis=0)
    aligned = np.sqrt((stacked.sum(axis=0).astype(np.float64) ** 2).sum(axis=1))
    nonzero_sources = (norms > 0.0).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        conflict = 1.0 - aligned / denom
    conflict = np.where((denom > 0.0) & (nonzero_sources >= 2), conflict, 0.0)
    return np.clip(conflict, 0.0, 1.0)


def conflict_report(model: DetectionModel, images: Tensor, targets: list[TargetMaps],
                    mode: str, resize: str, lambda_box: float = 2.0) -> ConflictReport:
    """Mean conflict over level-1 positive positions of a probe batch."""
    batch = decompose_batch(model, images, targets, mode, resize, lambda_box=lambda_box)
    conflict = conflict_map(batch)
    positives = targets[0].objectness[:, 0] > 0.5
    mean = float(conflict[positives].mean()) if positives.any() else 0.0
    return ConflictReport(mean_conflict=mean, per_position_conflict=conflict,
                          positives_mask=positives)


def verify_eq6(model: DetectionModel, images: Tensor, targets: list[TargetMaps],
               tol: float = 1e-8, lambda_box: float = 2.0) -> dict:
    """Check the constant-weight identity dL/dx1 = sum_l w_l * dL/dy_l.

    Only valid in the identity-resize, detached-weight configuration;
    anywhere else the identity does not hold and calling this is a
    configuration error.
    """
    if not model.config.identity_resize or model.config.fusion_mode != "asff":
        raise ConfigError("verify_eq6 requires the identity-resize ASFF test configuration")
    outputs = model.forward(images, detach_weights=True)
    loss = detection_loss(outputs.preds, targets, lambda_box=lambda_box)
    ag.backward(loss)
    x1 = outputs.levels[0]
    lhs = x1.grad.copy()
    rhs = np.zeros_like(lhs)
    for l_idx, y_l in enumerate(outputs.fused):
        w_map = outputs.fusion_weights[l_idx].weights.data[:, 0:1]
        rhs += w_map * y_l.grad
    max_abs_diff = float(np.max(np.abs(lhs - rhs)))
    return {"max_abs_diff": max_abs_diff, "tol": tol, "pass": max_abs_diff <= tol}


def write_conflict_csv(path: str, batch: BatchDecomposition, batch_index: int = 0) -> None:
    """One row per level-1 position: contribution norms, conflict, weights."""
    conflict = conflict_map(batch)
    h1, w1 = batch.total.shape[2:]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for i in range(h1):
            for j in range(w1):
                norms = [float(np.linalg.norm(g[batch_index, :, i, j]))
                         for g in batch.contributions]
                total_norm = float(np.linalg.norm(batch.total[batch_index, :, i, j]))
                ratios = [s // batch.strides[0] for s in batch.strides]
                if all(w is not None for w in batch.weight_maps):
                    weights = [float(batch.weight_maps[l][batch_index, i // ratios[l], j // ratios[l]])
                               for l in range(NUM_LEVELS)]
                else:
                    weights = [float("nan")] * NUM_LEVELS
                writer.writerow([i, j, *(f"{v:.9g}" for v in norms),
                                 f"{total_norm:.9g}",
                                 f"{conflict[batch_index, i, j]:.9g}",
                                 *(f"{v:.9g}" for v in weights)])
