"""Seismic volume / horizon persistence, label masks, and sparse line splits.

File formats
------------
* ``<name>.vol``  raw little-endian float32, inline-major, then crossline, then time
* ``<name>.volh`` ``key=value`` text header: n_il, n_xl, n_t, dt_ms, il0, xl0
* horizon CSV     ``il,xl,twt_ms`` (``NaN`` for uninterpreted columns)
* point cloud CSV ``il,xl,t_index,prob`` preceded by a ``# dims=...`` comment
* surface CSV     one row per inline, one value per crossline, ``NaN`` = missing
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:
    from .postprocess import PointCloud

DT_MS = 4.0
BAND_PX = 3
DIRECTIONS = ("inline", "crossline")


class CorruptFileError(ValueError):
    pass


@dataclass
class Volume:
    amplitudes: np.ndarray
    dt_ms: float = DT_MS
    il0: int = 0
    xl0: int = 0

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=np.float32)
        if self.amplitudes.ndim != 3 or min(self.amplitudes.shape) < 1:
            raise ValueError(f"volume must be a non-empty 3-D array, got {self.amplitudes.shape}")
        if not self.dt_ms > 0:
            raise ValueError("dt_ms must be positive")
        if not np.all(np.isfinite(self.amplitudes)):
            raise ValueError("volume contains non-finite amplitudes")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.amplitudes.shape


@dataclass
class HorizonGrid:
    """Two-way time (ms) per (inline, crossline) column; NaN marks a missing pick."""

    twt_ms: np.ndarray

    def __post_init__(self):
        self.twt_ms = np.asarray(self.twt_ms, dtype=np.float64)
        if self.twt_ms.ndim != 2:
            raise ValueError("horizon grid must be 2-D")

    @property
    def shape(self) -> tuple[int, int]:
        return self.twt_ms.shape

    @property
    def defined(self) -> np.ndarray:
        return np.isfinite(self.twt_ms)


@dataclass(frozen=True)
class SplitPlan:
    direction: str
    spacing: int
    train_line_indices: tuple[int, ...]
    valid_line_indices: tuple[int, ...]


# ---------------------------------------------------------------- volumes

def _header_path(path: Path) -> Path:
    return path.with_suffix(".volh")


def save_volume(volume: Volume, path: str | Path) -> None:
    path = Path(path).with_suffix(".vol")
    n_il, n_xl, n_t = volume.shape
    path.write_bytes(np.ascontiguousarray(volume.amplitudes, dtype="<f4").tobytes())
    _header_path(path).write_text(
        f"n_il={n_il}\nn_xl={n_xl}\nn_t={n_t}\ndt_ms={volume.dt_ms!r}\n"
        f"il0={volume.il0}\nxl0={volume.xl0}\n"
    )


def read_header(path: str | Path) -> dict:
    hdr = _header_path(Path(path))
    fields = {}
    for line in hdr.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, val = line.partition("=")
        fields[key.strip()] = val.strip()
    try:
        return {
            "n_il": int(fields["n_il"]), "n_xl": int(fields["n_xl"]), "n_t": int(fields["n_t"]),
            "dt_ms": float(fields["dt_ms"]),
            "il0": int(fields.get("il0", 0)), "xl0": int(fields.get("xl0", 0)),
        }
    except (KeyError, ValueError) as exc:
        raise CorruptFileError(f"{hdr}: bad header ({exc})") from exc


def load_volume(path: str | Path) -> Volume:
    path = Path(path).with_suffix(".vol")
    h = read_header(path)
    raw = path.read_bytes()
    expected = h["n_il"] * h["n_xl"] * h["n_t"] * 4
    if len(raw) != expected:
        raise CorruptFileError(f"{path}: payload has {len(raw)} bytes, header implies {expected}")
    amps = np.frombuffer(raw, dtype="<f4").reshape(h["n_il"], h["n_xl"], h["n_t"]).astype(np.float32)
    return Volume(amps, h["dt_ms"], h["il0"], h["xl0"])


# ---------------------------------------------------------------- horizons and masks

def save_horizon(grid: HorizonGrid, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["il", "xl", "twt_ms"])
        for (i, j), v in np.ndenumerate(grid.twt_ms):
            w.writerow([i, j, _fmt(v)])


def load_horizon(path: str | Path, shape: tuple[int, int] | None = None) -> HorizonGrid:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if shape is None:
        shape = (int(rows[:, 0].max()) + 1, int(rows[:, 1].max()) + 1) if len(rows) else (0, 0)
    grid = np.full(shape, np.nan)
    if len(rows):
        grid[rows[:, 0].astype(int), rows[:, 1].astype(int)] = rows[:, 2]
    return HorizonGrid(grid)


def horizon_to_mask(horizon: HorizonGrid, volume_dims: tuple[int, int, int], dt_ms: float,
                    band_px: int = BAND_PX) -> np.ndarray:
    """Binary label volume: a vertical band of ``band_px`` samples centred on each pick."""
    n_il, n_xl, n_t = volume_dims
    if horizon.shape != (n_il, n_xl):
        raise ValueError(f"horizon grid {horizon.shape} does not match volume {volume_dims[:2]}")
    twt = horizon.twt_ms
    defined = horizon.defined
    t_max = (n_t - 1) * dt_ms
    bad = defined & ((twt < 0) | (twt > t_max))
    if bad.any():
        i, j = map(int, np.argwhere(bad)[0])
        raise ValueError(f"horizon at column (il={i}, xl={j}) has twt {twt[i, j]} ms outside [0, {t_max}]")
    half = band_px // 2
    k = np.where(defined, np.rint(np.where(defined, twt, 0.0) / dt_ms), -10 ** 6).astype(np.int64)
    t = np.arange(n_t)
    mask = (np.abs(t[None, None, :] - k[:, :, None]) <= half) & defined[:, :, None]
    return mask.astype(np.uint8)


# ---------------------------------------------------------------- splits

def make_split(n_lines: int, direction: str, spacing: int) -> SplitPlan:
    """Systematic split anchored at line 0: every ``spacing``-th line trains."""
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    if spacing < 1:
        raise ValueError("spacing must be >= 1")
    if spacing > n_lines:
        raise ValueError(f"spacing {spacing} exceeds line count {n_lines}")
    train = tuple(range(0, n_lines, spacing))
    valid = tuple(i for i in range(n_lines) if i % spacing)
    if not valid:
        raise ValueError("split leaves no validation lines")
    return SplitPlan(direction, spacing, train, valid)


def take_line(cube: np.ndarray, direction: str, index: int) -> np.ndarray:
    return cube[index] if direction == "inline" else cube[:, index]


def extract_labeled_slices(volume: Volume, mask: np.ndarray, plan: SplitPlan,
                           which: str = "train") -> list[tuple[np.ndarray, np.ndarray]]:
    """(amplitude section, label section) pairs for the train or valid lines of ``plan``."""
    if mask.shape != volume.shape:
        raise ValueError("mask and volume extents differ")
    lines = plan.train_line_indices if which == "train" else plan.valid_line_indices
    return [(take_line(volume.amplitudes, plan.direction, i), take_line(mask, plan.direction, i))
            for i in lines]


# ---------------------------------------------------------------- CSV exports

def _fmt(v: float) -> str:
    return "NaN" if not np.isfinite(v) else format(float(v), ".9g")


def export_point_cloud(cloud: "PointCloud", path: str | Path) -> None:
    buf = io.StringIO()
    buf.write(f"# dims={','.join(map(str, cloud.dims))} source={cloud.source}\n")
    buf.write("il,xl,t_index,prob\n")
    for i, j, k, p in zip(cloud.il.tolist(), cloud.xl.tolist(), cloud.t.tolist(), cloud.prob.tolist()):
        buf.write(f"{i},{j},{k},{format(p, '.9g')}\n")
    Path(path).write_text(buf.getvalue())


def load_point_cloud(path: str | Path) -> "PointCloud":
    from .postprocess import PointCloud

    lines = Path(path).read_text().splitlines()
    dims, source = None, "merged"
    body = []
    for line in lines:
        if line.startswith("#"):
            for tok in line[1:].split():
                key, _, val = tok.partition("=")
                if key == "dims":
                    dims = tuple(int(v) for v in val.split(","))
                elif key == "source":
                    source = val
        elif line and not line.startswith("il,"):
            body.append(line)
    if dims is None:
        raise CorruptFileError(f"{path}: point cloud lacks a '# dims=' header")
    if body:
        arr = np.loadtxt(body, delimiter=",", ndmin=2)
        idx = arr[:, :3].astype(np.int64)
        prob = arr[:, 3]
    else:
        idx = np.zeros((0, 3), dtype=np.int64)
        prob = np.zeros(0)
    return PointCloud(idx[:, 0], idx[:, 1], idx[:, 2], prob, dims, source)


def export_surface(grid: HorizonGrid, path: str | Path) -> None:
    with open(path, "w") as fh:
        for row in grid.twt_ms:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def load_surface(path: str | Path) -> HorizonGrid:
    rows = [line.split(",") for line in Path(path).read_text().splitlines() if line.strip()]
    return HorizonGrid(np.array([[float(v) for v in r] for r in rows], dtype=np.float64))
