"""Tests for the SGD loop, schedule, checkpoint format, and determinism."""

import json
import struct

import numpy as np
import pytest

from asff_lab import autograd as ag
from asff_lab.autograd import NumericError
from asff_lab.config import load_run_config
from asff_lab.model import DetectionModel, ModelConfig, batch_images
from asff_lab.synthetic import SceneConfig, generate_scene
from asff_lab.training import (
    CHECKPOINT_MAGIC,
    CheckpointError,
    ScheduleConfig,
    TrainState,
    load_checkpoint,
    lr_at,
    read_checkpoint_raw,
    save_checkpoint,
    sgd_step,
    train,
)

QUICK = {
    "schedule": {"total_epochs": 2, "warmup_epochs": 1},
    "train_scenes": 8,
    "val_scenes": 4,
    "batch_size": 4,
}


def quick_config(**overrides):
    data = {k: (dict(v) if isinstance(v, dict) else v) for k, v in QUICK.items()}
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key].update(value)
        else:
            data[key] = value
    return load_run_config(data)


def tiny_model(fusion_mode="asff", seed=0):
    config = ModelConfig(channels=(8, 6, 4), strides=(4, 8, 16), head_channels=4,
                         fusion_mode=fusion_mode)
    return DetectionModel.build(config, rng=np.random.default_rng(seed))


class TestSgdStep:
    def test_zero_lr_leaves_parameters_unchanged(self):
        model = tiny_model()
        state = TrainState.create(model, seed=0)
        before = {n: p.data.copy() for n, p in model.parameters().items()}
        grads = {n: np.ones_like(p.data) for n, p in model.parameters().items()}
        sgd_step(state, grads, lr=0.0)
        for n, p in model.parameters().items():
            np.testing.assert_array_equal(p.data, before[n])

    def test_plain_gradient_descent(self):
        model = tiny_model()
        state = TrainState.create(model, seed=0)
        before = {n: p.data.copy() for n, p in model.parameters().items()}
        grads = {n: np.full_like(p.data, 0.5) for n, p in model.parameters().items()}
        sgd_step(state, grads, lr=0.1, momentum=0.0, weight_decay=0.0)
        for n, p in model.parameters().items():
            np.testing.assert_allclose(p.data, before[n] - 0.05, atol=1e-6)

    def test_two_steps_match_hand_recurrence(self):
        # scalar quadratic f(x) = x^2 / 2, gradient x
        model = tiny_model()
        state = TrainState.create(model, seed=0)
        name = next(iter(model.parameters()))
        p = model.parameters()[name]
        p.data = np.full_like(p.data, 2.0)
        lr, mom, wd = 0.1, 0.9, 0.01

        x, v = 2.0, 0.0
        for _ in range(2):
            grads = {n: (q.data.copy() if n == name else np.zeros_like(q.data))
                     for n, q in model.parameters().items()}
            sgd_step(state, grads, lr=lr, momentum=mom, weight_decay=wd)
            v = mom * v + x + wd * x
            x = x - lr * v
        np.testing.assert_allclose(p.data, x, rtol=1e-6)

    def test_non_finite_gradient_names_parameter(self):
        model = tiny_model()
        state = TrainState.create(model, seed=0)
        grads = {n: np.zeros_like(p.data) for n, p in model.parameters().items()}
        bad = sorted(grads)[3]
        grads[bad][...] = np.nan
        with pytest.raises(NumericError, match=bad.replace(".", r"\.")):
            sgd_step(state, grads, lr=0.1)


class TestLrSchedule:
    CFG = ScheduleConfig(lr_max=0.01, lr_min=1e-4, warmup_epochs=4, total_epochs=30)

    def test_endpoint_warmup(self):
        assert lr_at(self.CFG.warmup_epochs, self.CFG) == self.CFG.lr_max

    def test_endpoint_total(self):
        np.testing.assert_allclose(lr_at(self.CFG.total_epochs, self.CFG), self.CFG.lr_min,
                                   atol=1e-12)

    def test_cosine_midpoint(self):
        mid = self.CFG.warmup_epochs + (self.CFG.total_epochs - self.CFG.warmup_epochs) / 2
        np.testing.assert_allclose(lr_at(mid, self.CFG),
                                   (self.CFG.lr_max + self.CFG.lr_min) / 2, atol=1e-12)

    def test_warmup_starts_at_zero_and_is_linear(self):
        assert lr_at(0, self.CFG) == 0.0
        np.testing.assert_allclose(lr_at(2, self.CFG), self.CFG.lr_max / 2, atol=1e-12)

    def test_continuous_at_junction_and_monotone_after(self):
        eps = 1e-9
        left = lr_at(self.CFG.warmup_epochs - eps, self.CFG)
        right = lr_at(self.CFG.warmup_epochs + eps, self.CFG)
        assert abs(left - right) < 1e-6
        values = [lr_at(e, self.CFG) for e in
                  np.linspace(self.CFG.warmup_epochs, self.CFG.total_epochs, 200)]
        assert all(a >= b - 1e-15 for a, b in zip(values, values[1:]))

    def test_invalid_schedule_rejected(self):
        with pytest.raises(ValueError):
            ScheduleConfig(lr_max=1e-5, lr_min=1e-4)
        with pytest.raises(ValueError):
            ScheduleConfig(warmup_epochs=30, total_epochs=30)


class TestCheckpointFormat:
    def _state(self, fusion_mode="asff"):
        model = tiny_model(fusion_mode)
        return TrainState.create(model, seed=5, extra={"scene": {"image_size": 64}})

    def test_roundtrip_restores_forward_bitwise(self, tmp_path):
        state = self._state()
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(state, path)
        restored = load_checkpoint(path)
        cfg = SceneConfig()
        for seed in range(10):
            images = batch_images([generate_scene(seed, cfg)])
            a = state.model.forward(images)
            b = restored.model.forward(images)
            for pa, pb in zip(a.preds, b.preds):
                np.testing.assert_array_equal(pa.data, pb.data)

    def test_header_offsets_slice_each_tensor(self, tmp_path):
        state = self._state()
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(state, path)
        header, body = read_checkpoint_raw(path)
        assert "__meta__" in header
        count = 0
        for name, entry in header.items():
            if name == "__meta__":
                continue
            raw = body[entry["offset"]:entry["offset"] + entry["length"]]
            arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"])
            if name.startswith("momentum/"):
                np.testing.assert_array_equal(arr, state.momentum[name[len("momentum/"):]])
            else:
                np.testing.assert_array_equal(arr, state.model.parameters()[name].data)
            count += 1
        assert count == 2 * len(state.model.parameters())

    def test_binary_layout(self, tmp_path):
        state = self._state()
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(state, path)
        with open(path, "rb") as fh:
            blob = fh.read()
        assert blob[:4] == CHECKPOINT_MAGIC == b"ASFF"
        (version,) = struct.unpack("<I", blob[4:8])
        (header_len,) = struct.unpack("<Q", blob[8:16])
        assert version == 1
        header = json.loads(blob[16:16 + header_len].decode("utf-8"))
        data_len = len(blob) - 16 - header_len
        assert data_len == sum(e["length"] for n, e in header.items() if n != "__meta__")

    def test_truncated_file_is_format_error(self, tmp_path):
        state = self._state()
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(state, path)
        with open(path, "rb") as fh:
            blob = fh.read()
        short = str(tmp_path / "short.ckpt")
        with open(short, "wb") as fh:
            fh.write(blob[:len(blob) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(short)

    def test_bad_magic_and_version(self, tmp_path):
        bad = str(tmp_path / "bad.ckpt")
        with open(bad, "wb") as fh:
            fh.write(b"NOPE" + b"\x00" * 32)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(bad)
        state = self._state()
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(state, path)
        with open(path, "rb") as fh:
            blob = bytearray(fh.read())
        blob[4:8] = struct.pack("<I", 99)
        with open(bad, "wb") as fh:
            fh.write(bytes(blob))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(bad)


class TestTrainLoop:
    def test_zero_epochs_writes_initial_checkpoint_only(self, tmp_path):
        cfg = quick_config(schedule={"total_epochs": 0, "warmup_epochs": 0})
        with pytest.raises(Exception):
            # warmup < total is a schedule invariant; zero-epoch runs use
            # a degenerate schedule below
            load_run_config({"schedule": {"total_epochs": 0, "warmup_epochs": 1}})
        result = train(cfg, str(tmp_path), seed=0)
        assert result.rows == []
        assert (tmp_path / "checkpoint-init.ckpt").exists()
        assert (tmp_path / "checkpoint.ckpt").exists()
        with open(tmp_path / "metrics.csv", encoding="utf-8") as fh:
            lines = fh.read().strip().splitlines()
        assert lines == ["epoch,lr,loss,ap50,conflict_mean"]

    def test_fixed_seed_reproduces_metrics_bitwise(self, tmp_path):
        cfg = quick_config()
        train(cfg, str(tmp_path / "a"), seed=3)
        train(cfg, str(tmp_path / "b"), seed=3)
        a = (tmp_path / "a" / "metrics.csv").read_bytes()
        b = (tmp_path / "b" / "metrics.csv").read_bytes()
        assert a == b

    def test_checkpoints_identical_across_runs(self, tmp_path):
        cfg = quick_config()
        train(cfg, str(tmp_path / "a"), seed=4)
        train(cfg, str(tmp_path / "b"), seed=4)
        a = (tmp_path / "a" / "checkpoint.ckpt").read_bytes()
        b = (tmp_path / "b" / "checkpoint.ckpt").read_bytes()
        assert a == b

    def test_fusion_parameters_move_in_asff_mode(self, tmp_path):
        cfg = quick_config(schedule={"total_epochs": 3, "warmup_epochs": 1})
        result = train(cfg, str(tmp_path), seed=1)
        state = load_checkpoint(result.final_checkpoint)
        lambda_tensors = [p for n, p in state.model.parameters().items()
                          if n.startswith("fusion.lambda")]
        assert lambda_tensors
        moved = sum(float(np.abs(p.data).sum()) for p in lambda_tensors)
        assert moved > 0.0  # joint optimization reaches the fusion branch

    def test_metrics_row_per_epoch(self, tmp_path):
        cfg = quick_config()
        result = train(cfg, str(tmp_path), seed=0)
        assert len(result.rows) == 2
        with open(tmp_path / "metrics.csv", encoding="utf-8") as fh:
            lines = fh.read().strip().splitlines()
        assert len(lines) == 3

    def test_random_shapes_trains(self, tmp_path):
        cfg = quick_config(random_shapes=True, random_shape_sizes=[48, 64])
        result = train(cfg, str(tmp_path), seed=0)
        assert len(result.rows) == 2

    def test_ignore_mode_trains(self, tmp_path):
        cfg = quick_config(fusion_mode="ignore", ignore_mode="area", epsilon_ignore=0.5)
        result = train(cfg, str(tmp_path), seed=0)
        assert len(result.rows) == 2
