"""Command-line entry point: synthetic fixtures, training, prediction, filtering, fusion, evaluation.

Every subcommand also reads a flat ``key=value`` file given with --config;
keys are the long flag names without dashes (``lr=5e-4``, ``arch=unet,cfa_unet``).
Flags given on the command line win over the file.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure,
4 undefined metric.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import reporting
from .architectures import ARCH_IDS, load_weights
from .geometry_eval import UndefinedMetricError, diff_map, evaluate, surface_from_cloud
from .postprocess import DbscanParams, NoClusterWarning, PointCloud, extract_point_cloud, filter_cloud, fuse_orthogonal
from .synthetics import Fault, SynthSpec, generate
from .trainer import NumericalError, TrainConfig, build_patches, default_config, predict_volume, train
from .volume_io import (BAND_PX, DIRECTIONS, CorruptFileError, Volume, export_point_cloud, export_surface,
                        extract_labeled_slices, horizon_to_mask, load_horizon, load_point_cloud, load_surface,
                        load_volume, make_split, read_header, save_horizon, save_volume)

log = logging.getLogger("horizon_forge")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_METRIC = 0, 2, 3, 4
SPACINGS = (10, 20, 40)
THREADS_ENV = "HORIZON_FORGE_THREADS"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config plumbing

def read_kv(path: str | Path) -> dict[str, str]:
    try:
        return reporting.read_snapshot(path)
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc


def _merge_config(args: argparse.Namespace) -> argparse.Namespace:
    """Fill flags left at None from the --config file."""
    if not getattr(args, "config", None):
        return args
    for key, val in read_kv(args.config).items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise UsageError(f"unknown key {key!r} in {args.config}")
        if getattr(args, attr) is None:
            setattr(args, attr, val)
    return args


def _csv_list(v, cast=str) -> list:
    if v is None:
        return []
    if isinstance(v, (list, tuple)):
        return [cast(x) for x in v]
    return [cast(x.strip()) for x in str(v).split(",") if x.strip()]


def _need(args, *names):
    for n in names:
        if getattr(args, n, None) in (None, ""):
            raise UsageError(f"missing required option --{n.replace('_', '-')}")


def _check_arch(arch: str) -> str:
    if arch not in ARCH_IDS:
        raise UsageError(f"unknown architecture {arch!r}; valid ids: {', '.join(ARCH_IDS)}")
    return arch


def _check_direction(d: str) -> str:
    if d not in DIRECTIONS:
        raise UsageError(f"unknown direction {d!r}; valid: {', '.join(DIRECTIONS)}")
    return d


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_volume(path) -> Volume:
    try:
        return load_volume(path)
    except FileNotFoundError as exc:
        raise UsageError(f"volume not found: {exc.filename}") from exc
    except CorruptFileError as exc:
        raise UsageError(str(exc)) from exc


def _load_truth(path, shape) -> "reporting.HorizonGrid":
    try:
        return load_horizon(path, shape)
    except FileNotFoundError as exc:
        raise UsageError(f"horizon not found: {exc.filename}") from exc
    except (CorruptFileError, ValueError) as exc:
        raise UsageError(f"{path}: {exc}") from exc


def dbscan_params(args) -> DbscanParams:
    base = DbscanParams()
    kw = {}
    for flag, name, cast in (("eps", "epsilon", float), ("minpts", "min_pts", int),
                             ("zfactor", "z_factor", float), ("tau", "tau", float)):
        v = getattr(args, flag, None)
        if v is not None:
            kw[name] = cast(v)
    try:
        return replace(base, **kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def train_config(args, arch: str) -> TrainConfig:
    over = {}
    for flag, name, cast in (("lr", "learning_rate", float), ("batch", "batch_size", int),
                             ("epochs", "max_epochs", int), ("patience", "patience", int),
                             ("seed", "seed", int), ("base", "base_channels", int)):
        v = getattr(args, flag, None)
        if v is not None:
            over[name] = cast(v)
    try:
        return default_config(_check_arch(arch), **over)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------- stages

def synth_spec(args) -> SynthSpec:
    spec = SynthSpec()
    kw = {}
    try:
        if args.dims is not None:
            kw["dims"] = tuple(_csv_list(args.dims, int))
            if len(kw["dims"]) != 3:
                raise ValueError("dims needs three integers")
        for flag, cast in (("dt_ms", float), ("peak_hz", float), ("noise_std", float), ("seed", int),
                           ("target_layer", int)):
            v = getattr(args, flag, None)
            if v is not None:
                kw["target_layer_index" if flag == "target_layer" else flag] = cast(v)
        if args.fault is not None and str(args.fault).lower() == "none":
            kw["faults"] = ()
        elif args.fault is not None:
            il0, xl0, il1, xl1, throw = _csv_list(args.fault, float)
            kw["faults"] = (Fault(il0, xl0, il1, xl1, int(throw)),)
        spec = replace(spec, **kw)
        spec.validate()
    except (ValueError, TypeError, IndexError) as exc:
        raise UsageError(f"invalid synthetic spec: {exc}") from exc
    return spec


def cmd_synth(args) -> int:
    _need(args, "out")
    spec = synth_spec(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vol, truth = generate(spec)
    save_volume(vol, out / "volume.vol")
    save_horizon(truth, out / "truth.csv")
    print(f"wrote {out / 'volume.vol'} dims={'x'.join(map(str, vol.shape))} and {out / 'truth.csv'}")
    return EXIT_OK


def prepare_patches(volume: Volume, truth, direction: str, spacing: int, band: int, seed: int):
    mask = horizon_to_mask(truth, volume.shape, volume.dt_ms, band)
    n_lines = volume.shape[0] if direction == "inline" else volume.shape[1]
    plan = make_split(n_lines, direction, spacing)
    rng = np.random.default_rng(seed)
    train_p = build_patches(extract_labeled_slices(volume, mask, plan, "train"), rng)
    valid_p = build_patches(extract_labeled_slices(volume, mask, plan, "valid"), rng)
    return plan, train_p, valid_p


def run_training(volume_path, horizon_path, config: TrainConfig, direction: str, spacing: int, band: int,
                 run_dir: Path):
    vol = _load_volume(volume_path)
    truth = _load_truth(horizon_path, vol.shape[:2])
    try:
        plan, tr, va = prepare_patches(vol, truth, direction, spacing, band, config.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    log.info("%s %s spacing %d: %d train / %d valid patches", config.arch_id, direction, spacing, len(tr), len(va))
    extra = {"direction": direction, "spacing": spacing, "band": band,
             "volume": str(volume_path), "horizon": str(horizon_path)}
    return train(config, tr, va, run_dir=run_dir, extra=extra)


def cmd_train(args) -> int:
    _need(args, "volume", "horizon", "arch", "direction", "spacing", "out")
    arch = _check_arch(args.arch)
    direction = _check_direction(args.direction)
    cfg = train_config(args, arch)
    band = int(args.band) if args.band is not None else BAND_PX
    run_dir = Path(args.out)
    _, history = run_training(args.volume, args.horizon, cfg, direction, int(args.spacing), band, run_dir)
    b = history.best
    print(f"best epoch {b.epoch}: valid_loss {b.valid_loss:.4f} valid_iou {b.valid_iou:.4f} "
          f"({len(history.records)} epochs{', stopped early' if history.stopped_early else ''})")
    print(f"weights.best sha256 {sha256_file(run_dir / 'weights.best')}")
    return EXIT_OK


def cmd_predict(args) -> int:
    _need(args, "weights", "volume", "direction", "out")
    direction = _check_direction(args.direction)
    try:
        weights = load_weights(args.weights)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load weights {args.weights}: {exc}") from exc
    vol = _load_volume(args.volume)
    if weights.spec.input_shape[2] != 1:
        raise UsageError("weights expect multi-channel input; volumes are single-channel")
    prob = predict_volume(weights, vol, direction)
    save_volume(Volume(prob, vol.dt_ms, vol.il0, vol.xl0), args.out)
    print(f"wrote probability volume {Path(args.out).with_suffix('.vol')} dims={'x'.join(map(str, prob.shape))}")
    return EXIT_OK


def run_filter(prob: np.ndarray, params: DbscanParams, source: str) -> tuple[PointCloud, int, int]:
    cloud = extract_point_cloud(prob, params.tau, source)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", NoClusterWarning)
        kept, labeling = filter_cloud(cloud, params)
    for w in caught:
        print(f"warning: {w.message}")
    return kept, len(cloud), labeling.n_clusters


def cmd_filter(args) -> int:
    _need(args, "prob", "out")
    params = dbscan_params(args)
    print(f"DBSCAN epsilon={params.epsilon} MinPts={params.min_pts} z_factor={params.z_factor} tau={params.tau:g}")
    vol = _load_volume(args.prob)
    p = vol.amplitudes
    if p.min() < 0 or p.max() > 1:
        raise UsageError(f"{args.prob} is not a probability volume (values outside [0, 1])")
    kept, n_raw, n_clusters = run_filter(p, params, args.source or "inline")
    export_point_cloud(kept, args.out)
    print(f"points above tau: {n_raw}; clusters: {n_clusters}; retained: {len(kept)}")
    return EXIT_OK


def _load_cloud(path) -> PointCloud:
    try:
        return load_point_cloud(path)
    except FileNotFoundError as exc:
        raise UsageError(f"point cloud not found: {exc.filename}") from exc
    except (CorruptFileError, ValueError) as exc:
        raise UsageError(f"{path}: {exc}") from exc


def cmd_merge(args) -> int:
    _need(args, "out")
    if len(args.clouds) != 2:
        raise UsageError("merge takes exactly two point-cloud files")
    a, b = (_load_cloud(p) for p in args.clouds)
    try:
        m = fuse_orthogonal(a, b)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    export_point_cloud(m, args.out)
    print(f"|A| = {len(a)}  |B| = {len(b)}  |A u B| = {len(m)}")
    return EXIT_OK


def run_evaluate(pred_grid, truth, out: Path):
    report = evaluate(pred_grid, truth)
    report.to_csv(out)
    export_surface(diff_map(pred_grid, truth), out.with_name(out.stem + "_diff.csv"))
    return report


def _load_any_surface(path):
    """Grid CSV as written by export_surface, or an il,xl,twt_ms column file."""
    with open(path) as fh:
        first = fh.readline()
    return load_horizon(path) if first.startswith("il,") else load_surface(path)


def cmd_evaluate(args) -> int:
    _need(args, "horizon", "out")
    if (args.cloud is None) == (args.surface is None):
        raise UsageError("give exactly one of --cloud or --surface")
    dt = float(args.dt) if args.dt is not None else None
    if args.volume is not None:
        dt = read_header(args.volume)["dt_ms"]
    if args.cloud is not None:
        cloud = _load_cloud(args.cloud)
        pred = surface_from_cloud(cloud, dt if dt is not None else 4.0)
    else:
        try:
            pred = _load_any_surface(args.surface)
        except (OSError, ValueError) as exc:
            raise UsageError(f"{args.surface}: {exc}") from exc
    truth = _load_truth(args.horizon, pred.shape)
    report = run_evaluate(pred, truth, Path(args.out))
    print(report.text())
    return EXIT_OK


# ---------------------------------------------------------------- experiment matrix

@dataclass
class ExperimentConfig:
    volume: str
    horizon: str
    archs: list[str]
    directions: list[str]
    spacings: list[int]
    out: str
    train_overrides: dict = field(default_factory=dict)
    dbscan: DbscanParams = field(default_factory=DbscanParams)
    band: int = BAND_PX
    seed: int = 0
    resume: bool = False

    def __post_init__(self):
        for a in self.archs:
            _check_arch(a)
        for d in self.directions:
            _check_direction(d)
        bad = [s for s in self.spacings if s not in SPACINGS]
        if bad:
            raise UsageError(f"spacings must be drawn from {SPACINGS}, got {bad}")
        if not (self.archs and self.directions and self.spacings):
            raise UsageError("the run matrix is empty")

    def runs(self) -> list[tuple[str, str, int]]:
        return [(a, d, s) for a in self.archs for d in self.directions for s in self.spacings]

    def run_dir(self, arch: str, direction: str, spacing: int) -> Path:
        return Path(self.out) / "runs" / f"{arch}_{direction}_s{spacing}"

    def merge_dir(self, arch: str, spacing: int) -> Path:
        return Path(self.out) / "merged" / f"{arch}_s{spacing}"


RUN_OUTPUTS = ("config.snapshot", "weights.best", "history.csv", "prob.vol", "cloud.csv")
DONE_FILE = "done.sha256"


def _write_done(run_dir: Path, names) -> None:
    lines = [f"{sha256_file(run_dir / n)}  {n}" for n in names if (run_dir / n).exists()]
    (run_dir / DONE_FILE).write_text("\n".join(lines) + "\n")


def run_complete(run_dir: Path, names=RUN_OUTPUTS) -> bool:
    """True when every output is listed in the checksum file and still matches it."""
    done = run_dir / DONE_FILE
    if not done.exists():
        return False
    listed = {}
    for line in done.read_text().splitlines():
        digest, _, name = line.partition("  ")
        listed[name] = digest
    return all(n in listed and (run_dir / n).exists() and sha256_file(run_dir / n) == listed[n] for n in names)


def _set_status(d: Path, status: str) -> None:
    d.mkdir(parents=True, exist_ok=True)
    (d / "status").write_text(status + "\n")


def execute_run(exp: ExperimentConfig, arch: str, direction: str, spacing: int) -> str:
    """train -> predict -> filter -> evaluate for one matrix cell; returns its status."""
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    run_dir = exp.run_dir(arch, direction, spacing)
    if exp.resume and run_complete(run_dir):
        log.info("skip %s (complete)", run_dir.name)
        return "skipped"
    run_dir.mkdir(parents=True, exist_ok=True)
    # stub identity so a run that fails before training still gets a summary row
    (run_dir / "config.snapshot").write_text(f"arch_id={arch}\ndirection={direction}\nspacing={spacing}\n")
    stage = "train"
    try:
        args = argparse.Namespace(**{k: exp.train_overrides.get(k) for k in ("lr", "batch", "epochs", "patience", "base")},
                                  seed=exp.seed)
        cfg = train_config(args, arch)
        weights, _ = run_training(exp.volume, exp.horizon, cfg, direction, spacing, exp.band, run_dir)
        stage = "predict"
        vol = _load_volume(exp.volume)
        prob = predict_volume(weights, vol, direction)
        save_volume(Volume(prob, vol.dt_ms, vol.il0, vol.xl0), run_dir / "prob.vol")
        stage = "filter"
        kept, _, _ = run_filter(prob, exp.dbscan, direction)
        export_point_cloud(kept, run_dir / "cloud.csv")
        stage = "evaluate"
        truth = _load_truth(exp.horizon, vol.shape[:2])
        status = "ok"
        try:
            run_evaluate(surface_from_cloud(kept, vol.dt_ms), truth, run_dir / "report.csv")
        except UndefinedMetricError as exc:
            status = f"undefined-metric: {exc}"
        _write_done(run_dir, RUN_OUTPUTS + ("prob.volh",))
    except NumericalError as exc:
        status = f"failed: {stage}: {exc}"
    except (UsageError, ValueError, OSError) as exc:
        status = f"failed: {stage}: {exc}"
    _set_status(run_dir, status)
    return status


def execute_merge(exp: ExperimentConfig, arch: str, spacing: int) -> str:
    d = exp.merge_dir(arch, spacing)
    d.mkdir(parents=True, exist_ok=True)
    (d / "merge.snapshot").write_text(f"arch_id={arch}\nspacing={spacing}\n")
    clouds = [exp.run_dir(arch, direc, spacing) / "cloud.csv" for direc in exp.directions]
    if len(clouds) != 2 or not all(c.exists() for c in clouds):
        status = "skipped: needs both directions"
        _set_status(d, status)
        return status
    try:
        merged = fuse_orthogonal(*(load_point_cloud(c) for c in clouds))
        export_point_cloud(merged, d / "merged.csv")
        dt = read_header(exp.volume)["dt_ms"]
        surface = surface_from_cloud(merged, dt)
        export_surface(surface, d / "surface.csv")
        run_evaluate(surface, _load_truth(exp.horizon, surface.shape), d / "report.csv")
        status = "ok"
    except UndefinedMetricError as exc:
        status = f"undefined-metric: {exc}"
    except (UsageError, ValueError, OSError) as exc:
        status = f"failed: merge: {exc}"
    _set_status(d, status)
    return status


def worker_count(jobs: int | None) -> int:
    n = max(1, int(jobs or 1))
    cap = os.environ.get(THREADS_ENV)
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {cap!r}") from None
    return n


def run_matrix(exp: ExperimentConfig, jobs: int = 1) -> list[reporting.SummaryRow]:
    cells = exp.runs()
    n = worker_count(jobs)
    if n == 1:
        statuses = [execute_run(exp, *c) for c in cells]
    else:
        with ProcessPoolExecutor(max_workers=n) as pool:
            statuses = list(pool.map(execute_run, [exp] * len(cells), *zip(*cells)))
    for c, s in zip(cells, statuses):
        log.info("%s %s s%d: %s", *c, s)
    dirs = [exp.run_dir(*c) for c in cells]
    if set(exp.directions) == set(DIRECTIONS):
        for a in exp.archs:
            for s in exp.spacings:
                execute_merge(exp, a, s)
                dirs.append(exp.merge_dir(a, s))
    rows = reporting.aggregate(dirs)
    reporting.write_summary(rows, Path(exp.out) / "summary.csv")
    return rows


def experiment_from_args(args) -> ExperimentConfig:
    _need(args, "volume", "horizon", "out")
    for p in (Path(args.volume).with_suffix(".volh"), Path(args.horizon)):
        if not p.exists():
            raise UsageError(f"input not found: {p}")
    overrides = {k: getattr(args, k) for k in ("lr", "batch", "epochs", "patience", "base")
                 if getattr(args, k) is not None}
    return ExperimentConfig(
        volume=args.volume, horizon=args.horizon,
        archs=_csv_list(args.arch) or list(ARCH_IDS),
        directions=_csv_list(args.direction) or list(DIRECTIONS),
        spacings=_csv_list(args.spacing, int) or list(SPACINGS),
        out=args.out, train_overrides=overrides, dbscan=dbscan_params(args),
        band=int(args.band) if args.band is not None else BAND_PX,
        seed=int(args.seed) if args.seed is not None else 0,
        resume=_truthy(args.resume),
    )


def _truthy(v) -> bool:
    return v is True or str(v).lower() in ("1", "true", "yes", "on")


def cmd_matrix(args) -> int:
    exp = experiment_from_args(args)
    rows = run_matrix(exp, int(args.jobs) if args.jobs is not None else 1)
    merged = [r for r in rows if r.direction == "merged"]
    print(f"wrote {Path(exp.out) / 'summary.csv'}: {len(rows)} rows, {len(merged)} merged")
    return EXIT_OK


def cmd_report(args) -> int:
    _need(args, "runs", "out")
    root = Path(args.runs)
    dirs = sorted(p for p in root.rglob("*") if p.is_dir())
    rows = reporting.aggregate(dirs)
    reporting.write_summary(rows, args.out)
    print(f"wrote {args.out}: {len(rows)} rows")
    return EXIT_OK


def cmd_maps(args) -> int:
    _need(args, "runs", "horizon", "out")
    root = Path(args.runs)
    surfaces = sorted(root.rglob("surface.csv"))
    grids = {p.parent.name: load_surface(p) for p in surfaces}
    shape = next(iter(grids.values())).shape if grids else None
    grids["truth"] = _load_truth(args.horizon, shape)
    try:
        written = reporting.export_depth_maps(grids, args.out)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    print(f"wrote {len(written)} files to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- argument parsing

def _add_common(p: argparse.ArgumentParser, *groups: str) -> None:
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help="log progress to stderr")
    p.add_argument("--config", help="key=value file supplying defaults for any flag below")
    p.add_argument("--out", help="output path (file or directory depending on the command)")
    if "data" in groups:
        p.add_argument("--volume", help="amplitude volume (.vol with .volh header)")
        p.add_argument("--horizon", help="truth horizon CSV (il,xl,twt_ms)")
    if "train" in groups:
        p.add_argument("--arch", help=f"architecture id(s), comma separated: {', '.join(ARCH_IDS)}")
        p.add_argument("--direction", help="inline or crossline (comma list for matrix)")
        p.add_argument("--spacing", help="train on every Nth line: 10, 20 or 40 (comma list for matrix)")
        p.add_argument("--lr", help="learning rate (default: per-architecture tuned value)")
        p.add_argument("--batch", help="batch size (default: per-architecture tuned value)")
        p.add_argument("--epochs", help="maximum epochs (default 500)")
        p.add_argument("--patience", help="early-stopping patience in epochs (default 30)")
        p.add_argument("--base", help="channels of the first encoder level (default 64; 16 for unet_compressed)")
        p.add_argument("--band", help=f"label band height in samples (default {BAND_PX})")
        p.add_argument("--seed", help="seed for initialization, shuffling and dropout (default 0)")
    if "dbscan" in groups:
        p.add_argument("--eps", help="DBSCAN radius (default 6.0)")
        p.add_argument("--minpts", help="DBSCAN core threshold, self included (default 25)")
        p.add_argument("--zfactor", help="divisor applied to the time axis before clustering (default 3.0)")
        p.add_argument("--tau", help="probability threshold for the point cloud (default 1e-5)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="horizon-forge", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic volume and its exact horizon")
    _add_common(p)
    p.add_argument("--dims", help="n_il,n_xl,n_t (default 96,96,96)")
    p.add_argument("--dt-ms", dest="dt_ms", help="sample interval in ms (default 4)")
    p.add_argument("--peak-hz", dest="peak_hz", help="Ricker peak frequency (default 25)")
    p.add_argument("--noise-std", dest="noise_std", help="Gaussian noise level (default 0.05)")
    p.add_argument("--target-layer", dest="target_layer", help="index of the labelled interface (default 2)")
    p.add_argument("--fault", help="il0,xl0,il1,xl1,throw or 'none' (default 0,30,95,70,5)")
    p.add_argument("--seed", help="noise seed (default 0)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model and write a run directory")
    _add_common(p, "data", "train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="probability volume from trained weights")
    _add_common(p)
    p.add_argument("--weights", help="weights file (weights.best of a run)")
    p.add_argument("--volume", help="amplitude volume")
    p.add_argument("--direction", help="inline or crossline sections")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("filter", help="threshold, cluster and keep the largest cluster")
    _add_common(p, "dbscan")
    p.add_argument("--prob", help="probability volume")
    p.add_argument("--source", help="label stored in the cloud header (default inline)")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("merge", help="union of two filtered clouds")
    _add_common(p)
    p.add_argument("clouds", nargs="*", help="two point-cloud CSV files")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("evaluate", help="MAE, MSE and coverage against a truth horizon")
    _add_common(p)
    p.add_argument("--cloud", help="point-cloud CSV")
    p.add_argument("--surface", help="surface grid CSV")
    p.add_argument("--horizon", help="truth horizon CSV")
    p.add_argument("--volume", help="volume whose header supplies dt")
    p.add_argument("--dt", help="sample interval in ms when no volume is given (default 4)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("matrix", help="train/predict/filter every (arch, direction, spacing) and summarize")
    _add_common(p, "data", "train", "dbscan")
    p.add_argument("--jobs", help="parallel runs (capped by HORIZON_FORGE_THREADS)")
    p.add_argument("--resume", action="store_const", const=True, default=None,
                   help="skip runs whose outputs match their checksum file")
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("report", help="aggregate run directories into summary.csv")
    _add_common(p)
    p.add_argument("--runs", help="directory searched recursively for runs")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("maps", help="export surfaces as CSV grids and greyscale images")
    _add_common(p)
    p.add_argument("--runs", help="directory searched recursively for surface.csv files")
    p.add_argument("--horizon", help="truth horizon CSV")
    p.set_defaults(func=cmd_maps)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _merge_config(args)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except UndefinedMetricError as exc:
        print(f"undefined metric: {exc}", file=sys.stderr)
        return EXIT_METRIC


if __name__ == "__main__":
    sys.exit(main())
