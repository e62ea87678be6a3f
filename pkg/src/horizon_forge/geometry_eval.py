"""Surface reconstruction from point clouds and geometric horizon metrics."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .postprocess import PointCloud
from .volume_io import HorizonGrid


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class EvalReport:
    mae_ms: float
    mse_ms2: float
    coverage_pct: float
    n_columns_truth: int
    n_columns_pred: int

    def to_csv(self, path: str | Path) -> None:
        row = asdict(self)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row))
            w.writeheader()
            w.writerow({k: format(v, ".9g") if isinstance(v, float) else v for k, v in row.items()})

    @classmethod
    def from_csv(cls, path: str | Path) -> "EvalReport":
        with open(path, newline="") as fh:
            row = next(csv.DictReader(fh))
        return cls(float(row["mae_ms"]), float(row["mse_ms2"]), float(row["coverage_pct"]),
                   int(row["n_columns_truth"]), int(row["n_columns_pred"]))

    def text(self) -> str:
        return (f"MAE {self.mae_ms:.3f} ms | MSE {self.mse_ms2:.3f} ms^2 | "
                f"coverage {self.coverage_pct:.2f}% ({self.n_columns_pred} predicted / "
                f"{self.n_columns_truth} truth columns)")


def surface_from_cloud(cloud: PointCloud, dt_ms: float, reduce: str = "weighted_mean") -> HorizonGrid:
    """Collapse each (il, xl) column to one two-way time.

    ``weighted_mean`` uses probability weights; ``median`` takes the median
    t_index of the column's points.
    """
    n_il, n_xl, _ = cloud.dims
    grid = np.full((n_il, n_xl), np.nan)
    if not len(cloud):
        return HorizonGrid(grid)
    col = cloud.il * n_xl + cloud.xl
    if reduce == "weighted_mean":
        wsum = np.bincount(col, weights=cloud.prob, minlength=n_il * n_xl)
        tsum = np.bincount(col, weights=cloud.prob * cloud.t, minlength=n_il * n_xl)
        has = wsum > 0
        flat = grid.reshape(-1)
        flat[has] = dt_ms * (tsum[has] / wsum[has])
    elif reduce == "median":
        # cloud is sorted by (il, xl, t), so each column's points are contiguous
        ucol, start, count = np.unique(col, return_index=True, return_counts=True)
        flat = grid.reshape(-1)
        for c, s, k in zip(ucol, start, count):
            flat[c] = dt_ms * float(np.median(cloud.t[s:s + k]))
    else:
        raise ValueError(f"unknown column reduction {reduce!r}")
    return HorizonGrid(grid)


def _same_extent(pred: HorizonGrid, truth: HorizonGrid) -> None:
    if pred.shape != truth.shape:
        raise ValueError(f"grid extents differ: {pred.shape} vs {truth.shape}")


def geometric_errors(pred: HorizonGrid, truth: HorizonGrid) -> tuple[float, float]:
    """(MAE ms, MSE ms^2) over columns defined in both grids."""
    _same_extent(pred, truth)
    both = pred.defined & truth.defined
    if not both.any():
        raise UndefinedMetricError("prediction and truth share no defined columns")
    d = pred.twt_ms[both] - truth.twt_ms[both]
    return float(np.abs(d).mean()), float((d * d).mean())


def coverage(pred: HorizonGrid, truth: HorizonGrid) -> float:
    """Percent of truth columns that the prediction also defines."""
    _same_extent(pred, truth)
    n_truth = int(truth.defined.sum())
    if n_truth == 0:
        raise UndefinedMetricError("truth horizon has no defined columns")
    return 100.0 * int((pred.defined & truth.defined).sum()) / n_truth


def diff_map(pred: HorizonGrid, truth: HorizonGrid) -> HorizonGrid:
    _same_extent(pred, truth)
    both = pred.defined & truth.defined
    out = np.full(pred.shape, np.nan)
    out[both] = pred.twt_ms[both] - truth.twt_ms[both]
    return HorizonGrid(out)


def evaluate(pred: HorizonGrid, truth: HorizonGrid) -> EvalReport:
    mae, mse = geometric_errors(pred, truth)
    return EvalReport(mae, mse, coverage(pred, truth), int(truth.defined.sum()), int(pred.defined.sum()))
