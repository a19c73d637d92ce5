"""Desk-scale synthetic detection task with a three-level pyramid head.

Scenes are grayscale images containing filled rectangles and ellipses of
three size classes on a noisy background.  Each object is supervised at
exactly one pyramid level, chosen by the square root of its box area, and
only the cell containing the object center at that level is a positive
sample.  That construction makes the cross-level gradient conflict
directly observable: an object's center cell is positive at its own level
and background at the other two.

Also provides the single-class inference path: sigmoid scoring, box
decoding, greedy NMS, and all-point interpolated average precision.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import NumericError, Tensor

logger = logging.getLogger(__name__)

SIZE_CLASSES = ("small", "medium", "large")

# Box-size channel used when decoding: log-size offsets are clamped to
# +-LOG_SIZE_CLAMP so an early wild prediction cannot overflow exp().
LOG_SIZE_CLAMP = 4.0


@dataclass(frozen=True)
class SceneConfig:
    """Scene generator settings; sizes are pixel side lengths per class."""

    image_size: int = 64
    min_objects: int = 2
    max_objects: int = 4
    size_ranges: tuple = ((4.0, 8.0), (8.0, 16.0), (16.0, 32.0))
    mixture: tuple = (1 / 3, 1 / 3, 1 / 3)
    strides: tuple = (4, 8, 16)
    # sqrt-area thresholds between levels; equality assigns the lower level
    level_thresholds: tuple = (8.0, 16.0)
    background: float = 0.1
    noise_std: float = 0.05
    max_place_retries: int = 25

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("object count bounds must satisfy 1 <= min <= max")
        if list(self.level_thresholds) != sorted(set(self.level_thresholds)):
            raise ValueError("level thresholds must be strictly increasing")
        if abs(sum(self.mixture) - 1.0) > 1e-9:
            raise ValueError("size-class mixture must sum to 1")


@dataclass(frozen=True)
class SceneObject:
    box: tuple[float, float, float, float]  # x1, y1, x2, y2 in pixels
    size_class: str


@dataclass
class SyntheticScene:
    image: np.ndarray  # (1, H, W) float32 in [0, 1]
    objects: list[SceneObject]


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    score: float
    class_id: int = 0


@dataclass
class TargetMaps:
    """Per-level supervision: center positives, loss weights, box offsets."""

    stride: int
    objectness: np.ndarray   # (N, 1, h, w) in {0, 1}
    loss_weight: np.ndarray  # (N, 1, h, w); zero means ignored
    box_offsets: np.ndarray  # (N, 4, h, w): dx, dy, log-w, log-h at positives


def assign_levels(objects: list[SceneObject], thresholds) -> list[int]:
    """Map sqrt(box area) through the threshold buckets; ties go low."""
    levels = []
    for obj in objects:
        x1, y1, x2, y2 = obj.box
        metric = float(np.sqrt((x2 - x1) * (y2 - y1)))
        level = 1
        for t in thresholds:
            if metric > t:
                level += 1
        levels.append(level)
    return levels


def _center_cell(box, stride: int, grid: tuple[int, int]) -> tuple[int, int]:
    x1, y1, x2, y2 = box
    j = min(int((x1 + x2) / 2.0 // stride), grid[1] - 1)
    i = min(int((y1 + y2) / 2.0 // stride), grid[0] - 1)
    return i, j


def generate_scene(rng_seed: int, cfg: SceneConfig) -> SyntheticScene:
    """Deterministic scene for a seed: placed blobs plus background noise.

    Placement retries until each object's center cell at its assigned
    level is unoccupied; after ``max_place_retries`` failures the scene is
    emitted with fewer objects and a log record.
    """
    rng = np.random.default_rng(rng_seed)
    size = cfg.image_size
    image = np.clip(
        cfg.background + rng.normal(0.0, cfg.noise_std, size=(size, size)), 0.0, 1.0)

    count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objects: list[SceneObject] = []
    taken_cells: set[tuple[int, int, int]] = set()  # (level, i, j)
    for _ in range(count):
        placed = False
        for _ in range(cfg.max_place_retries):
            cls_idx = int(rng.choice(len(SIZE_CLASSES), p=cfg.mixture))
            lo, hi = cfg.size_ranges[cls_idx]
            w = float(rng.uniform(lo, hi))
            h = float(rng.uniform(lo, hi))
            cx = float(rng.uniform(w / 2, size - w / 2))
            cy = float(rng.uniform(h / 2, size - h / 2))
            box = (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
            obj = SceneObject(box=box, size_class=SIZE_CLASSES[cls_idx])
            level = assign_levels([obj], cfg.level_thresholds)[0]
            stride = cfg.strides[level - 1]
            grid = (size // stride, size // stride)
            cell = _center_cell(box, stride, grid)
            if (level, *cell) in taken_cells:
                continue
            taken_cells.add((level, *cell))
            objects.append(obj)
            intensity = float(rng.uniform(0.45, 0.95))
            _render_blob(image, box, intensity, ellipse=bool(rng.integers(0, 2)))
            placed = True
            break
        if not placed:
            logger.info("scene %d: dropped an object after %d placement retries",
                        rng_seed, cfg.max_place_retries)
    return SyntheticScene(image=image[None].astype(np.float32), objects=objects)


def _render_blob(image: np.ndarray, box, intensity: float, ellipse: bool) -> None:
    x1, y1, x2, y2 = box
    size = image.shape[0]
    ys, xs = np.mgrid[0:size, 0:size]
    if ellipse:
        cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
        rx, ry = max((x2 - x1) / 2, 0.5), max((y2 - y1) / 2, 0.5)
        mask = ((xs + 0.5 - cx) / rx) ** 2 + ((ys + 0.5 - cy) / ry) ** 2 <= 1.0
    else:
        mask = (xs + 0.5 >= x1) & (xs + 0.5 <= x2) & (ys + 0.5 >= y1) & (ys + 0.5 <= y2)
    image[mask] = intensity


def build_targets(scenes: list[SyntheticScene], cfg: SceneConfig) -> list[TargetMaps]:
    """Batched per-level target maps for a list of same-sized scenes."""
    n = len(scenes)
    size = scenes[0].image.shape[-1]
    targets = []
    for stride in cfg.strides:
        g = size // stride
        targets.append(TargetMaps(
            stride=stride,
            objectness=np.zeros((n, 1, g, g), dtype=np.float32),
            loss_weight=np.ones((n, 1, g, g), dtype=np.float32),
            box_offsets=np.zeros((n, 4, g, g), dtype=np.float32),
        ))
    for s_idx, scene in enumerate(scenes):
        levels = assign_levels(scene.objects, cfg.level_thresholds)
        for obj, level in zip(scene.objects, levels):
            t = targets[level - 1]
            grid = t.objectness.shape[2:]
            i, j = _center_cell(obj.box, t.stride, grid)
            x1, y1, x2, y2 = obj.box
            cx, cy, w, h = (x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1
            t.objectness[s_idx, 0, i, j] = 1.0
            t.box_offsets[s_idx, :, i, j] = (
                cx / t.stride - (j + 0.5),
                cy / t.stride - (i + 0.5),
                np.log(w / t.stride),
                np.log(h / t.stride),
            )
    return targets


def scene_assignments(scene: SyntheticScene, cfg: SceneConfig):
    """(box, level) pairs consumed by the ignore-region masking."""
    levels = assign_levels(scene.objects, cfg.level_thresholds)
    return [(obj.box, level) for obj, level in zip(scene.objects, levels)]


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _grid_centers(n: int, grid: tuple[int, int], stride: int, dtype) -> tuple[Tensor, Tensor]:
    h, w = grid
    jj = (np.arange(w) + 0.5) * stride
    ii = (np.arange(h) + 0.5) * stride
    gx = np.broadcast_to(jj[None, None, None, :], (n, 1, h, w)).astype(dtype)
    gy = np.broadcast_to(ii[None, None, :, None], (n, 1, h, w)).astype(dtype)
    return Tensor(np.ascontiguousarray(gx)), Tensor(np.ascontiguousarray(gy))


def decode_box_maps(offsets: Tensor, stride: int):
    """Per-cell predicted boxes (x1, y1, x2, y2) from offset maps.

    Centers are (cell center + dx) * stride; sizes are exp(clamped
    log-size) * stride, so every decoded box has positive area.
    """
    n, c, h, w = offsets.shape
    if c != 4:
        raise ag.DimensionError("decode_box_maps", "C", 4, c)
    dtype = offsets.dtype
    gx, gy = _grid_centers(n, (h, w), stride, dtype)
    lo = ag.full((n, 1, h, w), -LOG_SIZE_CLAMP, dtype=dtype)
    hi = ag.full((n, 1, h, w), LOG_SIZE_CLAMP, dtype=dtype)
    dx = ag.slice_channels(offsets, 0, 1)
    dy = ag.slice_channels(offsets, 1, 2)
    lw = ag.minimum(ag.maximum(ag.slice_channels(offsets, 2, 3), lo), hi)
    lh = ag.minimum(ag.maximum(ag.slice_channels(offsets, 3, 4), lo), hi)
    cx = ag.add(ag.scale(dx, stride), gx)
    cy = ag.add(ag.scale(dy, stride), gy)
    bw = ag.scale(ag.exp(lw), stride)
    bh = ag.scale(ag.exp(lh), stride)
    return (ag.sub(cx, ag.scale(bw, 0.5)), ag.sub(cy, ag.scale(bh, 0.5)),
            ag.add(cx, ag.scale(bw, 0.5)), ag.add(cy, ag.scale(bh, 0.5)))


def iou_maps(a, b, eps: float = 1e-9) -> Tensor:
    """Elementwise IoU between two decoded box-map quadruples."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = ag.relu(ag.sub(ag.minimum(ax2, bx2), ag.maximum(ax1, bx1)))
    ih = ag.relu(ag.sub(ag.minimum(ay2, by2), ag.maximum(ay1, by1)))
    inter = ag.mul(iw, ih)
    area_a = ag.mul(ag.relu(ag.sub(ax2, ax1)), ag.relu(ag.sub(ay2, ay1)))
    area_b = ag.mul(ag.relu(ag.sub(bx2, bx1)), ag.relu(ag.sub(by2, by1)))
    union = ag.add_scalar(ag.sub(ag.add(area_a, area_b), inter), eps)
    return ag.div(inter, union)


def detection_loss(preds: list[Tensor], targets: list[TargetMaps],
                   lambda_box: float = 2.0) -> Tensor:
    """Weighted objectness BCE plus (1 - IoU) at positive cells, all levels.

    Cells whose loss weight is zero contribute exactly zero loss and zero
    gradient.  The total is normalized by the batch size only, so per-cell
    magnitudes stay comparable across image sizes.
    """
    if len(preds) != len(targets):
        raise ag.DimensionError("detection_loss", "levels", len(targets), len(preds))
    batch = preds[0].shape[0]
    total = None
    for level_idx, (pred, tgt) in enumerate(zip(preds, targets), start=1):
        if not np.all(np.isfinite(pred.data)):
            bad = np.argwhere(~np.isfinite(pred.data))[0]
            raise NumericError(
                f"detection_loss: non-finite prediction at level {level_idx}, "
                f"position (n={bad[0]}, c={bad[1]}, i={bad[2]}, j={bad[3]})")
        expected = tgt.objectness.shape[2:]
        if pred.shape[2:] != expected:
            raise ag.DimensionError(f"detection_loss(level {level_idx})", "H",
                                    expected, pred.shape[2:])
        dtype = pred.dtype
        obj_logits = ag.slice_channels(pred, 0, 1)
        bce = ag.bce_with_logits(obj_logits,
                                 Tensor(tgt.objectness.astype(dtype)),
                                 Tensor(tgt.loss_weight.astype(dtype)))
        level_loss = ag.sum_all(bce)

        pos = tgt.objectness * tgt.loss_weight  # positives can be ignored too
        if pos.any():
            pred_boxes = decode_box_maps(ag.slice_channels(pred, 1, 5), tgt.stride)
            tgt_boxes = decode_box_maps(Tensor(tgt.box_offsets.astype(dtype)), tgt.stride)
            iou = iou_maps(pred_boxes, tgt_boxes)
            one = ag.full(iou.shape, 1.0, dtype=dtype)
            box_term = ag.mul(ag.sub(one, iou), Tensor(pos.astype(dtype)))
            level_loss = ag.add(level_loss, ag.scale(ag.sum_all(box_term), lambda_box))
        total = level_loss if total is None else ag.add(total, level_loss)
    return ag.scale(total, 1.0 / batch)


# ---------------------------------------------------------------------------
# Inference: scoring, NMS, AP
# ---------------------------------------------------------------------------

def iou(box_a, box_b) -> float:
    """Intersection over union of two pixel boxes; degenerate boxes give 0."""
    ax1, ay1, ax2, ay2 = box_a
    bx1, by1, bx2, by2 = box_b
    area_a = max(ax2 - ax1, 0.0) * max(ay2 - ay1, 0.0)
    area_b = max(bx2 - bx1, 0.0) * max(by2 - by1, 0.0)
    if area_a == 0.0 or area_b == 0.0:
        return 0.0
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def nms(dets: list[Detection], threshold: float = 0.6) -> list[Detection]:
    """Greedy per-class suppression; survivors have pairwise IoU <= threshold.

    Candidates are visited in descending score order with ties broken by
    insertion index, so the result is deterministic.
    """
    kept: list[Detection] = []
    by_class: dict[int, list[tuple[int, Detection]]] = {}
    for idx, d in enumerate(dets):
        by_class.setdefault(d.class_id, []).append((idx, d))
    for class_id in sorted(by_class):
        candidates = sorted(by_class[class_id], key=lambda p: (-p[1].score, p[0]))
        survivors: list[Detection] = []
        for _, det in candidates:
            if all(iou(det.box, kept_det.box) <= threshold for kept_det in survivors):
                survivors.append(det)
        kept.extend(survivors)
    return kept


def decode_detections(preds: list[Tensor], strides, score_threshold: float = 0.05,
                      nms_threshold: float = 0.6, max_per_image: int = 50) -> list[list[Detection]]:
    """Per-image detections from raw head outputs, after NMS."""
    batch = preds[0].shape[0]
    per_image: list[list[Detection]] = [[] for _ in range(batch)]
    for pred, stride in zip(preds, strides):
        logits = pred.data[:, 0]
        scores = 1.0 / (1.0 + np.exp(-logits))
        boxes = decode_box_maps(Tensor(pred.data[:, 1:5].copy()), stride)
        x1, y1, x2, y2 = (b.data[:, 0] for b in boxes)
        for n in range(batch):
            for i, j in np.argwhere(scores[n] >= score_threshold):
                per_image[n].append(Detection(
                    box=(float(x1[n, i, j]), float(y1[n, i, j]),
                         float(x2[n, i, j]), float(y2[n, i, j])),
                    score=float(scores[n, i, j])))
    out = []
    for dets in per_image:
        dets = sorted(dets, key=lambda d: -d.score)[:max_per_image]
        out.append(nms(dets, nms_threshold))
    return out


def evaluate_ap(dets_per_scene: list[list[Detection]],
                gts_per_scene: list[list[tuple]],
                iou_threshold: float = 0.5) -> float:
    """All-point interpolated average precision over a scene collection.

    Detections are ranked by descending score; each ground-truth box can
    match at most once.  Raises if there is no ground truth at all, since
    AP is undefined there.
    """
    total_gt = sum(len(g) for g in gts_per_scene)
    if total_gt == 0:
        raise ValueError("evaluate_ap: no ground-truth boxes; AP is undefined")
    ranked = sorted(
        ((d.score, scene_idx, det_idx, d)
         for scene_idx, dets in enumerate(dets_per_scene)
         for det_idx, d in enumerate(dets)),
        key=lambda r: (-r[0], r[1], r[2]))
    matched: list[set[int]] = [set() for _ in gts_per_scene]
    tps = []
    for _, scene_idx, _, det in ranked:
        best_iou, best_gt = 0.0, -1
        for gt_idx, gt_box in enumerate(gts_per_scene[scene_idx]):
            if gt_idx in matched[scene_idx]:
                continue
            overlap = iou(det.box, gt_box)
            if overlap > best_iou:
                best_iou, best_gt = overlap, gt_idx
        if best_iou >= iou_threshold and best_gt >= 0:
            matched[scene_idx].add(best_gt)
            tps.append(1.0)
        else:
            tps.append(0.0)
    if not tps:
        return 0.0
    tp_cum = np.cumsum(tps)
    ranks = np.arange(1, len(tps) + 1)
    precision = tp_cum / ranks
    recall = tp_cum / total_gt
    # precision envelope from the right, then sum over recall increments
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = 0.0
    ap = 0.0
    for p, r in zip(envelope, recall):
        if r > prev_recall:
            ap += (r - prev_recall) * p
            prev_recall = r
    return float(ap)


# ---------------------------------------------------------------------------
# Scene dumps
# ---------------------------------------------------------------------------

def dump_scene(scene: SyntheticScene, path_prefix: str) -> tuple[str, str]:
    """Write the image as binary PGM plus a JSON sidecar of the boxes."""
    from .pgm import write_pgm

    pgm_path = f"{path_prefix}.pgm"
    json_path = f"{path_prefix}.json"
    write_pgm(pgm_path, np.clip(scene.image[0] * 255.0, 0, 255).astype(np.uint8))
    sidecar = {
        "objects": [
            {"box": [round(v, 4) for v in obj.box], "size_class": obj.size_class}
            for obj in scene.objects
        ]
    }
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2)
    return pgm_path, json_path
