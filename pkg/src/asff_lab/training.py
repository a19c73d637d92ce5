"""Deterministic SGD training loop with warmup + cosine schedule.

All randomness derives from the run seed, batches execute in a fixed
order, and gradient accumulation is deterministic, so a fixed seed
reproduces the metrics CSV bitwise.  Checkpoints are written atomically
(temp file + rename) in a self-contained binary format:

    magic "ASFF" | u32 LE version | u64 LE header length |
    UTF-8 JSON header | concatenated little-endian float32 blobs

The JSON header maps each tensor name to its dtype, shape, byte offset
(relative to the end of the header) and byte length; the reserved
"__meta__" entry carries the model topology, epoch, seed, and scene
settings needed to rebuild the model for analysis.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import analyzer
from . import autograd as ag
from .autograd import NumericError
from .fusion import IgnoreConfig, apply_ignore_mask
from .model import DetectionModel, ModelConfig, batch_images
from .synthetic import (
    SceneConfig,
    build_targets,
    decode_detections,
    detection_loss,
    evaluate_ap,
    generate_scene,
    scene_assignments,
)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ASFF"
CHECKPOINT_VERSION = 1

METRICS_HEADER = ("epoch", "lr", "loss", "ap50", "conflict_mean")


class CheckpointError(ValueError):
    """A checkpoint file is malformed: bad magic, version, or truncation."""

    def __init__(self, path: str, reason: str):
        self.path = path
        self.reason = reason
        super().__init__(f"{path}: {reason}")


@dataclass(frozen=True)
class ScheduleConfig:
    lr_max: float = 0.01
    lr_min: float = 1e-4
    warmup_epochs: int = 4
    total_epochs: int = 30

    def __post_init__(self):
        if not self.lr_max >= self.lr_min > 0:
            raise ValueError(f"need lr_max >= lr_min > 0, got {self.lr_max}, {self.lr_min}")
        # total_epochs == 0 is the degenerate "initial checkpoint only" run
        if self.total_epochs != 0 or self.warmup_epochs != 0:
            if not 0 <= self.warmup_epochs < self.total_epochs:
                raise ValueError("need 0 <= warmup_epochs < total_epochs")


def lr_at(epoch: float, cfg: ScheduleConfig) -> float:
    """Linear 0 -> lr_max over warmup, then cosine decay to lr_min.

    ``epoch`` may be fractional so callers can anneal within an epoch.
    """
    if epoch < 0 or epoch > cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs}]")
    if epoch < cfg.warmup_epochs:
        return cfg.lr_max * epoch / cfg.warmup_epochs
    t = epoch - cfg.warmup_epochs
    span = cfg.total_epochs - cfg.warmup_epochs
    return float(cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + np.cos(np.pi * t / span)))


@dataclass
class TrainState:
    model: DetectionModel
    momentum: dict[str, np.ndarray]
    epoch: int = 0
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def create(cls, model: DetectionModel, seed: int, extra: dict | None = None) -> "TrainState":
        momentum = {name: np.zeros_like(p.data) for name, p in model.parameters().items()}
        return cls(model=model, momentum=momentum, seed=seed, extra=extra or {})


def sgd_step(state: TrainState, grads: dict[str, np.ndarray], lr: float,
             momentum: float = 0.9, weight_decay: float = 0.0005) -> TrainState:
    """v <- momentum*v + grad + wd*param; param <- param - lr*v."""
    lr = float(lr)
    for name, p in state.model.parameters().items():
        g = grads.get(name)
        if g is None:
            raise KeyError(f"sgd_step: missing gradient for parameter {name!r}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"sgd_step: non-finite gradient for parameter {name!r}")
        v = state.momentum[name]
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * p.data
        p.data = p.data - lr * v
    return state


# ---------------------------------------------------------------------------
# Checkpoint serialization
# ---------------------------------------------------------------------------

def save_checkpoint(state: TrainState, path: str) -> None:
    """Atomic write of parameters, momentum buffers, and model metadata."""
    entries: dict[str, dict] = {}
    blobs: list[bytes] = []
    offset = 0

    def add(name: str, arr: np.ndarray):
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries[name] = {"dtype": "float32", "shape": list(arr.shape),
                         "offset": offset, "length": len(raw)}
        blobs.append(raw)
        offset += len(raw)

    for name, p in state.model.parameters().items():
        add(name, p.data)
    for name, v in state.momentum.items():
        add(f"momentum/{name}", v)

    header: dict = {
        "__meta__": {
            "epoch": state.epoch,
            "seed": state.seed,
            "model": asdict(state.model.config),
            "extra": state.extra,
        }
    }
    header.update(entries)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp_path, path)


def read_checkpoint_raw(path: str) -> tuple[dict, bytes]:
    """Parse header and return (header dict, data section bytes)."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError as err:
        raise CheckpointError(path, "file not found") from err
    if len(data) < 16 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(path, "bad magic (not a checkpoint file)")
    (version,) = struct.unpack("<I", data[4:8])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(path, f"unsupported version {version}")
    (header_len,) = struct.unpack("<Q", data[8:16])
    if len(data) < 16 + header_len:
        raise CheckpointError(path, "truncated header")
    try:
        header = json.loads(data[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(path, f"unreadable header: {err}") from err
    body = data[16 + header_len:]
    for name, entry in header.items():
        if name == "__meta__":
            continue
        if entry["offset"] + entry["length"] > len(body):
            raise CheckpointError(path, f"truncated data for tensor {name!r}")
    return header, body


def load_checkpoint(path: str) -> TrainState:
    header, body = read_checkpoint_raw(path)
    meta = header.get("__meta__")
    if meta is None:
        raise CheckpointError(path, "missing __meta__ entry")
    model_meta = dict(meta["model"])
    for key in ("channels", "strides"):
        model_meta[key] = tuple(model_meta[key])
    config = ModelConfig(**model_meta)
    model = DetectionModel.build(config, rng=np.random.default_rng(0))

    def tensor_data(name: str) -> np.ndarray:
        entry = header[name]
        raw = body[entry["offset"]:entry["offset"] + entry["length"]]
        return np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()

    for name, p in model.parameters().items():
        if name not in header:
            raise CheckpointError(path, f"missing tensor {name!r}")
        loaded = tensor_data(name)
        if loaded.shape != p.data.shape:
            raise CheckpointError(path, f"tensor {name!r} has shape {loaded.shape}, "
                                        f"expected {p.data.shape}")
        p.data = loaded
    momentum = {}
    for name in model.parameters():
        key = f"momentum/{name}"
        momentum[name] = tensor_data(key) if key in header else np.zeros_like(model.params[name].data)

    return TrainState(model=model, momentum=momentum, epoch=int(meta["epoch"]),
                      seed=int(meta["seed"]), extra=meta.get("extra", {}))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    rows: list[dict]
    run_dir: str
    final_checkpoint: str
    init_checkpoint: str
    final_ap50: float
    final_conflict: float


def _scene_seed(seed: int, stream: int, index: int) -> int:
    return (seed * 1_000_003 + stream * 99_991 + index) % (2 ** 63)


def _make_scenes(seed: int, stream: int, count: int, cfg: SceneConfig):
    return [generate_scene(_scene_seed(seed, stream, i), cfg) for i in range(count)]


def _masked_targets(scenes, scene_cfg: SceneConfig, targets, ignore_cfg: IgnoreConfig):
    if ignore_cfg.mode == "off":
        return targets
    for idx, scene in enumerate(scenes):
        targets = apply_ignore_mask(targets, scene_assignments(scene, scene_cfg),
                                    ignore_cfg, scene_index=idx)
    return targets


def _subset_targets(targets, indices):
    return [replace(t,
                    objectness=t.objectness[indices],
                    loss_weight=t.loss_weight[indices],
                    box_offsets=t.box_offsets[indices])
            for t in targets]


def _evaluate(model: DetectionModel, scenes, targets, run_cfg) -> float:
    dets = []
    gts = []
    batch = run_cfg.batch_size
    for start in range(0, len(scenes), batch):
        chunk = scenes[start:start + batch]
        outputs = model.forward(batch_images(chunk))
        dets.extend(decode_detections(outputs.preds, model.config.strides,
                                      score_threshold=run_cfg.score_threshold))
        gts.extend([[obj.box for obj in s.objects] for s in chunk])
    return evaluate_ap(dets, gts)


def _conflict_mean(model: DetectionModel, scenes, targets, run_cfg) -> float:
    # coefficient-view decomposition: for adaptive fusion the weights are
    # treated as constants, so the metric captures cancellation among the
    # weighted feature-path contributions rather than control-map updates
    probe = min(len(scenes), max(run_cfg.batch_size, 32))
    images = batch_images(scenes[:probe])
    probe_targets = _subset_targets(targets, np.arange(probe))
    mode = {"asff": "asff_detached", "sum": "sum", "concat": "concat",
            "ignore": "sum"}[run_cfg.fusion_mode]
    resize = "identity" if run_cfg.model_config().identity_resize else "real"
    report = analyzer.conflict_report(model, images, probe_targets, mode, resize,
                                      lambda_box=run_cfg.lambda_box)
    return report.mean_conflict


def train(run_cfg, run_dir: str, seed: int | None = None) -> TrainResult:
    """Run one training arm; writes metrics.csv and checkpoints into run_dir.

    On a non-finite loss the loop aborts with NumericError; the metrics
    written so far and the last per-epoch checkpoint are retained.
    """
    os.makedirs(run_dir, exist_ok=True)
    seed = run_cfg.seeds[0] if seed is None else seed
    schedule: ScheduleConfig = run_cfg.schedule_config()
    scene_cfg: SceneConfig = run_cfg.scene_config()
    ignore_cfg = IgnoreConfig(epsilon_ignore=run_cfg.epsilon_ignore, mode=run_cfg.ignore_mode)

    model = DetectionModel.build(run_cfg.model_config(), rng=np.random.default_rng(seed))
    state = TrainState.create(model, seed=seed, extra={
        "scene": asdict(scene_cfg),
        "lambda_box": run_cfg.lambda_box,
        "score_threshold": run_cfg.score_threshold,
    })

    val_scenes = _make_scenes(seed, stream=2, count=run_cfg.val_scenes, cfg=scene_cfg)
    val_targets = build_targets(val_scenes, scene_cfg)

    init_path = os.path.join(run_dir, "checkpoint-init.ckpt")
    last_path = os.path.join(run_dir, "checkpoint.ckpt")
    save_checkpoint(state, init_path)
    if schedule.total_epochs == 0:
        save_checkpoint(state, last_path)

    metrics_path = os.path.join(run_dir, "metrics.csv")
    rows: list[dict] = []
    params = model.parameters()
    with open(metrics_path, "w", newline="", encoding="utf-8") as metrics_file:
        writer = csv.writer(metrics_file)
        writer.writerow(METRICS_HEADER)
        metrics_file.flush()

        for epoch in range(schedule.total_epochs):
            if run_cfg.random_shapes:
                size_rng = np.random.default_rng(_scene_seed(seed, 3, epoch))
                size = int(size_rng.choice(run_cfg.random_shape_sizes))
                epoch_scene_cfg = replace(scene_cfg, image_size=size)
                scenes = _make_scenes(seed, stream=10 + epoch, count=run_cfg.train_scenes,
                                      cfg=epoch_scene_cfg)
                targets_all = _masked_targets(
                    scenes, epoch_scene_cfg, build_targets(scenes, epoch_scene_cfg), ignore_cfg)
            elif epoch == 0:
                scenes = _make_scenes(seed, stream=1, count=run_cfg.train_scenes, cfg=scene_cfg)
                targets_all = _masked_targets(
                    scenes, scene_cfg, build_targets(scenes, scene_cfg), ignore_cfg)

            order = np.random.default_rng(_scene_seed(seed, 4, epoch)).permutation(len(scenes))
            steps = int(np.ceil(len(scenes) / run_cfg.batch_size))
            epoch_lr = lr_at(float(epoch), schedule)
            losses = []
            for step in range(steps):
                idx = order[step * run_cfg.batch_size:(step + 1) * run_cfg.batch_size]
                images = batch_images([scenes[i] for i in idx])
                targets = _subset_targets(targets_all, idx)
                model.zero_grads()
                outputs = model.forward(images)
                loss = detection_loss(outputs.preds, targets, lambda_box=run_cfg.lambda_box)
                loss_value = loss.item()
                if not np.isfinite(loss_value):
                    raise NumericError(f"training diverged at epoch {epoch} step {step}")
                ag.backward(loss, parameters=tuple(params.values()))
                lr = lr_at(epoch + step / steps, schedule)
                sgd_step(state, {n: p.grad for n, p in params.items()}, lr,
                         momentum=run_cfg.momentum, weight_decay=run_cfg.weight_decay)
                losses.append(loss_value)

            state.epoch = epoch + 1
            ap50 = _evaluate(model, val_scenes, val_targets, run_cfg)
            conflict = _conflict_mean(model, val_scenes, val_targets, run_cfg)
            row = {
                "epoch": epoch + 1,
                "lr": epoch_lr,
                "loss": float(np.mean(losses)),
                "ap50": ap50,
                "conflict_mean": conflict,
            }
            rows.append(row)
            writer.writerow([row["epoch"], repr(row["lr"]), repr(row["loss"]),
                             repr(row["ap50"]), repr(row["conflict_mean"])])
            metrics_file.flush()
            save_checkpoint(state, last_path)
            logger.info("epoch %d: loss=%.4f ap50=%.3f conflict=%.3f",
                        epoch + 1, row["loss"], ap50, conflict)

    final_ap = rows[-1]["ap50"] if rows else 0.0
    final_conflict = rows[-1]["conflict_mean"] if rows else 0.0
    return TrainResult(rows=rows, run_dir=run_dir, final_checkpoint=last_path,
                       init_checkpoint=init_path, final_ap50=final_ap,
                       final_conflict=final_conflict)
