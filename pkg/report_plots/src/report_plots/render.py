"""Figure rendering: weight-scalar heatmap panels and comparison curves.

Output PNGs are deterministic for identical inputs: the Agg backend with
fixed styling, a pinned Software metadata string, and no timestamps.
"""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .artifacts import ArtifactError, RunArtifacts, read_compare_csv, read_pgm  # noqa: E402

logger = logging.getLogger(__name__)

PNG_METADATA = {"Software": "report-plots"}
COLORMAP = "viridis"
DISPLAY_SIZE = 96  # all levels upsampled (nearest) to this square size
DPI = 100


def _to_display(img: np.ndarray) -> np.ndarray:
    """Nearest-neighbor upsample to the uniform display size."""
    reps_h = int(np.ceil(DISPLAY_SIZE / img.shape[0]))
    reps_w = int(np.ceil(DISPLAY_SIZE / img.shape[1]))
    big = np.repeat(np.repeat(img, reps_h, axis=0), reps_w, axis=1)
    return big[:DISPLAY_SIZE, :DISPLAY_SIZE]


def render_heatmaps(run_dir: str | Path, out_dir: str | Path) -> list[Path]:
    """One panel per (target level, source weight), plus a combined grid.

    The per-panel PNGs map PGM bytes straight through the colormap with a
    fixed 0..255 range, so panel pixel extrema correspond exactly to the
    byte extrema of the source PGM.
    """
    artifacts = RunArtifacts.discover(run_dir)
    if not artifacts.weight_pgms:
        raise ArtifactError(f"no weight-map PGMs (weights_t*_s*.pgm) under {run_dir}")
    out_dir = Path(out_dir)
    panels_dir = out_dir / "panels"
    panels_dir.mkdir(parents=True, exist_ok=True)

    written: list[Path] = []
    keys = sorted(artifacts.weight_pgms)
    images = {key: read_pgm(artifacts.weight_pgms[key]) for key in keys}

    for (target, source), img in images.items():
        panel_path = panels_dir / f"weights_t{target}_s{source}.png"
        plt.imsave(panel_path, _to_display(img), cmap=COLORMAP, vmin=0, vmax=255,
                   metadata=PNG_METADATA)
        written.append(panel_path)

    targets = sorted({t for t, _ in keys})
    sources = sorted({s for _, s in keys})
    fig, axes = plt.subplots(len(targets), len(sources),
                             figsize=(3 * len(sources), 3 * len(targets)),
                             squeeze=False)
    for row, target in enumerate(targets):
        for col, source in enumerate(sources):
            ax = axes[row][col]
            key = (target, source)
            if key in images:
                ax.imshow(_to_display(images[key]), cmap=COLORMAP, vmin=0, vmax=255,
                          interpolation="nearest")
            ax.set_title(f"target {target}, source {source}", fontsize=9)
            ax.set_xticks([])
            ax.set_yticks([])
    fig.suptitle("fusion weight maps (0 = dark, 1 = bright)", fontsize=11)
    combined = out_dir / "heatmaps.png"
    fig.savefig(combined, dpi=DPI, metadata=PNG_METADATA)
    plt.close(fig)
    written.append(combined)
    logger.info("wrote %d heatmap panels + combined grid", len(written) - 1)
    return written


def render_curves(compare_csv: str | Path, out_png: str | Path) -> Path:
    """Per-arm AP50 and conflict with seed scatter and median bars."""
    rows = read_compare_csv(compare_csv)
    if not rows:
        raise ArtifactError(f"{compare_csv}: no data rows")
    arms: list[str] = []
    for r in rows:
        if r["arm"] not in arms:
            arms.append(r["arm"])

    fig, (ax_ap, ax_conf) = plt.subplots(1, 2, figsize=(9, 4))
    for metric, ax, label in (("ap50", ax_ap, "AP50"),
                              ("conflict_mean", ax_conf, "mean conflict")):
        for idx, arm in enumerate(arms):
            values = [r[metric] for r in rows if r["arm"] == arm]
            ax.plot([idx] * len(values), values, "o", color="#4878cf",
                    alpha=0.6, markersize=5)
            median = float(np.median(values))
            ax.plot([idx - 0.25, idx + 0.25], [median, median], "-",
                    color="#d65f5f", linewidth=2)
        ax.set_xticks(range(len(arms)))
        ax.set_xticklabels(arms, rotation=20)
        ax.set_ylabel(label)
        ax.grid(True, alpha=0.3)
    fig.suptitle("per-arm results (dots: seeds, bar: median)", fontsize=11)
    fig.tight_layout()
    out_png = Path(out_png)
    out_png.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_png, dpi=DPI, metadata=PNG_METADATA)
    plt.close(fig)
    return out_png


def arm_medians(compare_csv: str | Path) -> dict[str, dict[str, float]]:
    """Median ap50/conflict per arm, as drawn by render_curves."""
    rows = read_compare_csv(compare_csv)
    out: dict[str, dict[str, float]] = {}
    for r in rows:
        out.setdefault(r["arm"], {"ap50": [], "conflict_mean": []})
        out[r["arm"]]["ap50"].append(r["ap50"])
        out[r["arm"]]["conflict_mean"].append(r["conflict_mean"])
    return {
        arm: {k: float(np.median(v)) for k, v in vals.items()}
        for arm, vals in out.items()
    }
