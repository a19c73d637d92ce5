"""Single executable for the experiments: train, analyze, compare.

    asff-lab train   --config cfg.json [--key.path=value ...] [--deterministic]
    asff-lab analyze --config cfg.json | --checkpoint=... [--scene_seed=N] [--out_dir=DIR]
    asff-lab compare --config cfg.json [--key.path=value ...]

Exit codes: 0 success, 1 runtime failure, 2 usage/config error.  Configs
are JSON; any scalar field can be overridden with a dotted path.  The
``ASFF_LAB_THREADS`` environment variable caps how many comparison arms
run in parallel processes (default 1: sequential, fully deterministic).
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import __version__, analyzer
from .config import (
    AnalyzeConfig,
    ConfigError,
    apply_overrides,
    load_analyze_config,
    load_run_config,
    read_json_config,
)
from .model import batch_images
from .pgm import write_pgm
from .synthetic import build_targets, dump_scene, generate_scene
from .training import CheckpointError, TrainResult, load_checkpoint, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def _resolve_config(args, require_file: bool) -> dict:
    if args.config is None:
        if require_file:
            raise ConfigError("--config is required")
        data: dict = {}
    else:
        data = read_json_config(args.config)
    apply_overrides(data, args.overrides)
    if args.deterministic:
        data["deterministic"] = True
    return data


def _write_resolved_config(cfg, run_dir: str) -> None:
    os.makedirs(run_dir, exist_ok=True)
    snapshot = {
        "tool": "asff-lab",
        "version": __version__,
        "config": dataclasses.asdict(cfg),
    }
    with open(os.path.join(run_dir, "resolved-config.json"), "w", encoding="utf-8") as fh:
        json.dump(snapshot, fh, indent=2, sort_keys=True)


def cmd_train(args) -> int:
    cfg = load_run_config(_resolve_config(args, require_file=True))
    if len(cfg.seeds) != 1:
        raise ConfigError("seeds: train runs a single seed; use `compare` for sweeps")
    run_dir = cfg.out_dir
    _write_resolved_config(cfg, run_dir)
    result = train(cfg, run_dir, seed=cfg.seeds[0])
    print(f"run complete: {len(result.rows)} epochs, final ap50={result.final_ap50:.4f}, "
          f"metrics at {os.path.join(run_dir, 'metrics.csv')}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg: AnalyzeConfig = load_analyze_config(_resolve_config(args, require_file=False))
    state = load_checkpoint(cfg.checkpoint)
    model = state.model
    os.makedirs(cfg.out_dir, exist_ok=True)

    from .synthetic import SceneConfig

    def _untuple(value):
        if isinstance(value, list):
            return tuple(_untuple(v) for v in value)
        return value

    scene_meta = state.extra.get("scene", {})
    scene_cfg = SceneConfig(**{k: _untuple(v) for k, v in scene_meta.items()})
    scenes = [generate_scene(cfg.scene_seed + i, scene_cfg) for i in range(cfg.num_scenes)]
    targets = build_targets(scenes, scene_cfg)
    images = batch_images(scenes)
    dump_scene(scenes[0], os.path.join(cfg.out_dir, "scene-0"))

    fusion_mode = model.config.fusion_mode
    mode = {"asff": "asff", "sum": "sum", "concat": "concat", "ignore": "sum"}[fusion_mode]
    resize = "identity" if model.config.identity_resize else "real"
    lambda_box = float(state.extra.get("lambda_box", cfg.lambda_box))
    batch = analyzer.decompose_batch(model, images, targets, mode, resize, lambda_box=lambda_box)
    analyzer.write_conflict_csv(os.path.join(cfg.out_dir, "conflict.csv"), batch)
    conflict = analyzer.conflict_map(batch)
    positives = targets[0].objectness[:, 0] > 0.5

    summary = {
        "checkpoint": cfg.checkpoint,
        "epoch": state.epoch,
        "fusion_mode": fusion_mode,
        "mean_conflict_positives": float(conflict[positives].mean()) if positives.any() else 0.0,
        "mean_conflict_all": float(conflict.mean()),
        "weight_maps_exported": 0,
        "verify_eq6": None,
    }

    if fusion_mode == "asff":
        outputs = model.forward(images)
        count = 0
        for l_idx, fw in enumerate(outputs.fusion_weights, start=1):
            wmaps = fw.weights.data[0]  # first scene
            for n in range(wmaps.shape[0]):
                byte_map = np.clip(np.rint(wmaps[n] * 255.0), 0, 255).astype(np.uint8)
                write_pgm(os.path.join(cfg.out_dir, f"weights_t{l_idx}_s{n + 1}.pgm"), byte_map)
                count += 1
        summary["weight_maps_exported"] = count
        if model.config.identity_resize:
            summary["verify_eq6"] = analyzer.verify_eq6(model, images, targets,
                                                        lambda_box=lambda_box)

    with open(os.path.join(cfg.out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(f"analysis written to {cfg.out_dir} "
          f"(mean conflict at positives: {summary['mean_conflict_positives']:.4f})")
    return EXIT_OK


def _run_arm_job(job) -> tuple[str, int, float, float]:
    arm_name, cfg, seed, run_dir = job
    result: TrainResult = train(cfg, run_dir, seed=seed)
    return arm_name, seed, result.final_ap50, result.final_conflict


def cmd_compare(args) -> int:
    cfg = load_run_config(_resolve_config(args, require_file=True))
    arms = cfg.arm_configs()
    out_dir = cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    _write_resolved_config(cfg, out_dir)

    jobs = []
    for arm_name, arm_cfg in arms:
        for seed in cfg.seeds:
            run_dir = os.path.join(out_dir, arm_name, f"seed-{seed}")
            _write_resolved_config(dataclasses.replace(arm_cfg, seeds=(seed,), out_dir=run_dir),
                                   run_dir)
            jobs.append((arm_name, arm_cfg, seed, run_dir))

    threads = max(1, int(os.environ.get("ASFF_LAB_THREADS", "1")))
    results: list[tuple[str, int, float, float]] = []
    failures: list[dict] = []
    if threads == 1:
        for job in jobs:
            try:
                results.append(_run_arm_job(job))
            except Exception as err:  # keep partial results
                logger.error("arm %s seed %s failed: %s", job[0], job[2], err)
                failures.append({"arm": job[0], "seed": job[2], "error": str(err)})
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=threads) as pool:
            futures = {pool.submit(_run_arm_job, job): job for job in jobs}
            for future in concurrent.futures.as_completed(futures):
                job = futures[future]
                try:
                    results.append(future.result())
                except Exception as err:
                    logger.error("arm %s seed %s failed: %s", job[0], job[2], err)
                    failures.append({"arm": job[0], "seed": job[2], "error": str(err)})
        order = {(job[0], job[2]): i for i, job in enumerate(jobs)}
        results.sort(key=lambda r: order[(r[0], r[1])])

    with open(os.path.join(out_dir, "compare.csv"), "w", encoding="utf-8", newline="") as fh:
        fh.write("arm,seed,ap50,conflict_mean\n")
        for arm_name, seed, ap50, conflict in results:
            fh.write(f"{arm_name},{seed},{ap50!r},{conflict!r}\n")

    summary = {"arms": [], "failed": failures, "seeds": list(cfg.seeds)}
    for arm_name, _ in arms:
        arm_rows = [r for r in results if r[0] == arm_name]
        if arm_rows:
            summary["arms"].append({
                "name": arm_name,
                "ap50_median": float(np.median([r[2] for r in arm_rows])),
                "conflict_median": float(np.median([r[3] for r in arm_rows])),
                "runs": len(arm_rows),
            })
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)

    for arm in summary["arms"]:
        print(f"{arm['name']}: median ap50={arm['ap50_median']:.4f} "
              f"median conflict={arm['conflict_median']:.4f} ({arm['runs']} runs)")
    if failures:
        print(f"{len(failures)} run(s) failed; partial results kept", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asff-lab",
                                     description="adaptive spatial fusion experiments")
    parser.add_argument("--version", action="version", version=f"asff-lab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("train", cmd_train), ("analyze", cmd_analyze), ("compare", cmd_compare)):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="path to a JSON config")
        p.add_argument("--deterministic", action="store_true",
                       help="force the deterministic single-thread mode")
        p.set_defaults(handler=fn)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    args, extra = parser.parse_known_args(argv)
    overrides = []
    for item in extra:
        if not item.startswith("--") or "=" not in item:
            parser.error(f"unrecognized argument {item!r} (overrides look like --key.path=value)")
        overrides.append(item[2:])
    args.overrides = overrides
    try:
        return args.handler(args)
    except (ConfigError, CheckpointError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:  # runtime failure
        logger.exception("runtime failure")
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
