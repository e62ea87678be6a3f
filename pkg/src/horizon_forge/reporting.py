"""Run-directory aggregation into summary tables and map-view exports of horizon grids."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .volume_io import HorizonGrid, export_surface

SUMMARY_VERSION = 1
SUMMARY_HEADER = f"# horizon-forge summary v{SUMMARY_VERSION}"
ABSENT = "NA"
SENTINEL = 0  # greyscale value of columns without a pick; picks map to 1..255


@dataclass
class SummaryRow:
    arch_id: str
    spacing: int
    direction: str  # inline | crossline | merged
    status: str = "ok"
    train_acc: float = math.nan
    valid_acc: float = math.nan
    train_iou: float = math.nan
    valid_iou: float = math.nan
    train_dice: float = math.nan
    valid_dice: float = math.nan
    mae_ms: float = math.nan
    mse_ms2: float = math.nan
    area_pct: float = math.nan


SUMMARY_FIELDS = tuple(f.name for f in fields(SummaryRow))
_METRICS = SUMMARY_FIELDS[4:]
_TRAINING = ("train_acc", "valid_acc", "train_iou", "valid_iou", "train_dice", "valid_dice")
_DIRECTION_ORDER = {"inline": 0, "crossline": 1, "merged": 2}


def read_snapshot(path: str | Path) -> dict[str, str]:
    """Flat key=value file; blank lines and '#' comments ignored."""
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        if sep:
            out[key.strip()] = val.strip()
    return out


def _read_report(path: Path) -> dict[str, float]:
    if not path.exists():
        return {}
    with open(path, newline="") as fh:
        row = next(csv.DictReader(fh), None)
    if row is None:
        return {}
    return {"mae_ms": float(row["mae_ms"]), "mse_ms2": float(row["mse_ms2"]),
            "area_pct": float(row["coverage_pct"])}


def _read_best_epoch(path: Path) -> dict[str, float]:
    if not path.exists():
        return {}
    best = None
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if best is None or float(row["valid_loss"]) < float(best["valid_loss"]):
                best = row
    if best is None:
        return {}
    return {k: float(best[k]) for k in _TRAINING if k in best}


def _status(run_dir: Path) -> str:
    p = run_dir / "status"
    return p.read_text().strip() if p.exists() else "ok"


def read_run(run_dir: str | Path) -> SummaryRow | None:
    """Direction row for a training run directory, merged row for a fusion directory, else None."""
    run_dir = Path(run_dir)
    if (run_dir / "config.snapshot").exists():
        snap = read_snapshot(run_dir / "config.snapshot")
        direction = snap.get("direction", "")
    elif (run_dir / "merge.snapshot").exists():
        snap = read_snapshot(run_dir / "merge.snapshot")
        direction = "merged"
    else:
        return None
    row = SummaryRow(snap["arch_id"], int(snap["spacing"]), direction, _status(run_dir))
    for k, v in {**_read_best_epoch(run_dir / "history.csv"), **_read_report(run_dir / "report.csv")}.items():
        setattr(row, k, v)
    return row


def aggregate(run_dirs: Iterable[str | Path]) -> list[SummaryRow]:
    """Summary rows sorted by (arch, spacing, direction).

    Every run directory yields its own direction row. A merged row is kept for
    an (arch, spacing) pair only when both directions are present; its
    training metrics are the mean of the two direction rows and its geometry
    comes from the fused evaluation.
    """
    direction_rows: dict[tuple[str, int], dict[str, SummaryRow]] = {}
    merged: dict[tuple[str, int], SummaryRow] = {}
    for d in run_dirs:
        row = read_run(d)
        if row is None:
            continue
        key = (row.arch_id, row.spacing)
        if row.direction == "merged":
            merged[key] = row
        else:
            direction_rows.setdefault(key, {})[row.direction] = row
    rows = [r for per in direction_rows.values() for r in per.values()]
    for key, per in direction_rows.items():
        if set(per) != {"inline", "crossline"}:
            continue
        m = merged.get(key, SummaryRow(key[0], key[1], "merged", "missing-merge"))
        for k in _TRAINING:
            setattr(m, k, (getattr(per["inline"], k) + getattr(per["crossline"], k)) / 2.0)
        rows.append(m)
    rows.sort(key=lambda r: (r.arch_id, r.spacing, _DIRECTION_ORDER.get(r.direction, 3)))
    return rows


def _cell(v) -> str:
    if isinstance(v, float):
        return ABSENT if not math.isfinite(v) else format(v, ".9g")
    return str(v)


def write_summary(rows: Iterable[SummaryRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(SUMMARY_HEADER + "\n")
        w = csv.writer(fh)
        w.writerow(SUMMARY_FIELDS)
        for r in rows:
            w.writerow([_cell(getattr(r, f)) for f in SUMMARY_FIELDS])


def read_summary(path: str | Path) -> list[SummaryRow]:
    with open(path, newline="") as fh:
        first = fh.readline().strip()
        if first != SUMMARY_HEADER:
            raise ValueError(f"{path}: expected header {SUMMARY_HEADER!r}, found {first!r}")
        rows = []
        for rec in csv.DictReader(fh):
            vals = {k: (math.nan if rec[k] == ABSENT else float(rec[k])) for k in _METRICS}
            rows.append(SummaryRow(rec["arch_id"], int(rec["spacing"]), rec["direction"], rec["status"], **vals))
    return rows


# ---------------------------------------------------------------- map exports

def to_greyscale(grid: HorizonGrid, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    """uint8 image of normalized twt; missing picks become ``SENTINEL``.

    Picks map linearly from [lo, hi] onto 1..255. A flat range maps to mid-grey.
    """
    twt = grid.twt_ms
    ok = grid.defined
    img = np.full(twt.shape, SENTINEL, dtype=np.uint8)
    if not ok.any():
        return img
    lo = float(twt[ok].min()) if lo is None else lo
    hi = float(twt[ok].max()) if hi is None else hi
    if hi > lo:
        scaled = 1.0 + 254.0 * np.clip((twt[ok] - lo) / (hi - lo), 0.0, 1.0)
        img[ok] = np.rint(scaled).astype(np.uint8)
    else:
        img[ok] = 128
    return img


def write_pgm(img: np.ndarray, path: str | Path) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary greyscale image")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w).copy()


def export_depth_maps(grids: Mapping[str, HorizonGrid], out_dir: str | Path) -> list[Path]:
    """One CSV grid and one greyscale image per named surface.

    All images share the twt range of the union of picks so shades compare
    across maps.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    shapes = {g.shape for g in grids.values()}
    if len(shapes) > 1:
        raise ValueError(f"surfaces differ in extent: {sorted(shapes)}")
    picks = [g.twt_ms[g.defined] for g in grids.values()]
    picks = np.concatenate(picks) if picks else np.zeros(0)
    lo, hi = (float(picks.min()), float(picks.max())) if picks.size else (None, None)
    written = []
    for name, g in sorted(grids.items()):
        export_surface(g, out_dir / f"{name}.csv")
        write_pgm(to_greyscale(g, lo, hi), out_dir / f"{name}.pgm")
        written += [out_dir / f"{name}.csv", out_dir / f"{name}.pgm"]
    return written
