"""Discovery and parsing of run-directory artifacts."""

from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

WEIGHT_PGM_RE = re.compile(r"weights_t(\d)_s(\d)\.pgm$")

COMPARE_HEADER = ["arm", "seed", "ap50", "conflict_mean"]


class ArtifactError(ValueError):
    """A required artifact is missing or malformed."""


@dataclass
class RunArtifacts:
    """Everything discovered under a run directory (searched recursively)."""

    root: Path
    metrics_csv: Path | None = None
    compare_csv: Path | None = None
    conflict_csv: Path | None = None
    weight_pgms: dict[tuple[int, int], Path] = field(default_factory=dict)

    @classmethod
    def discover(cls, run_dir: str | Path) -> "RunArtifacts":
        root = Path(run_dir)
        if not root.is_dir():
            raise ArtifactError(f"run directory not found: {root}")
        found = cls(root=root)
        for name in ("metrics.csv", "compare.csv", "conflict.csv"):
            matches = sorted(root.rglob(name))
            if matches:
                if len(matches) > 1:
                    logger.warning("multiple %s files under %s; using %s",
                                   name, root, matches[0])
                setattr(found, name.replace(".", "_"), matches[0])
            else:
                logger.warning("no %s under %s; skipping", name, root)
        for path in sorted(root.rglob("weights_t*_s*.pgm")):
            m = WEIGHT_PGM_RE.search(path.name)
            if m:
                key = (int(m.group(1)), int(m.group(2)))
                found.weight_pgms.setdefault(key, path)
        return found


def read_pgm(path: str | Path) -> np.ndarray:
    """Binary P5 with maxval 255, as written by the experiment CLI."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P5"):
        raise ArtifactError(f"{path}: not a binary PGM (P5) file")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise ArtifactError(f"{path}: expected maxval 255, got {maxval}")
    pixels = np.frombuffer(data[pos:pos + w * h], dtype=np.uint8)
    if pixels.size != w * h:
        raise ArtifactError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w).copy()


def read_compare_csv(path: str | Path) -> list[dict]:
    """Rows of arm/seed/ap50/conflict_mean; malformed lines name the line."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ArtifactError(f"{path}: empty file") from None
        if header != COMPARE_HEADER:
            raise ArtifactError(f"{path}: line 1: expected header {','.join(COMPARE_HEADER)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ArtifactError(f"{path}: line {lineno}: expected 4 fields, got {len(row)}")
            try:
                rows.append({"arm": row[0], "seed": int(row[1]),
                             "ap50": float(row[2]), "conflict_mean": float(row[3])})
            except ValueError as err:
                raise ArtifactError(f"{path}: line {lineno}: {err}") from None
    return rows
