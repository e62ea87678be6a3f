"""End-to-end desk experiment on the synthetic 96x96x96 fixture with one fault.

U-Net and CFA U-Net are trained on every 10th inline section. Each trained
model then labels the volume along inline and crossline sections; both
probability volumes go through DBSCAN filtering, the two clouds are fused,
and every surface is scored against the exact synthetic horizon.

    python3 scripts/desk_experiment.py --out results/desk [--width 16] [--epochs 200]
"""

import argparse
import csv
import logging
import time
from pathlib import Path

from horizon_forge.cli import prepare_patches, run_filter
from horizon_forge.geometry_eval import UndefinedMetricError, evaluate, surface_from_cloud
from horizon_forge.postprocess import DbscanParams, fuse_orthogonal
from horizon_forge.reporting import export_depth_maps
from horizon_forge.synthetics import SynthSpec, generate
from horizon_forge.trainer import default_config, predict_volume, train
from horizon_forge.volume_io import export_point_cloud, save_horizon, save_volume

log = logging.getLogger("desk")


def run(out: Path, archs, width: int, epochs: int, patience: int, spacing: int = 10):
    out.mkdir(parents=True, exist_ok=True)
    t_cpu = time.process_time()
    vol, truth = generate(SynthSpec())
    save_volume(vol, out / "volume.vol")
    save_horizon(truth, out / "truth.csv")
    _, tr, va = prepare_patches(vol, truth, "inline", spacing, 3, 0)
    log.info("%d train / %d valid patches", len(tr), len(va))
    params = DbscanParams()
    rows, surfaces = [], {"truth": truth}
    for arch in archs:
        cfg = default_config(arch, base_channels=width, max_epochs=epochs, patience=patience)
        run_dir = out / f"{arch}_inline_s{spacing}"
        t0 = time.process_time()
        weights, hist = train(cfg, tr, va, run_dir=run_dir, extra={"direction": "inline", "spacing": spacing})
        train_s = time.process_time() - t0
        clouds = {}
        for direction in ("inline", "crossline"):
            clouds[direction], n_raw, n_clusters = run_filter(predict_volume(weights, vol, direction), params,
                                                              direction)
            log.info("%s %s: %d points, %d clusters, %d kept", arch, direction, n_raw, n_clusters,
                     len(clouds[direction]))
        clouds["merged"] = fuse_orthogonal(clouds["inline"], clouds["crossline"])
        best = hist.best
        for view, cloud in clouds.items():
            export_point_cloud(cloud, run_dir / f"cloud_{view}.csv")
            surface = surface_from_cloud(cloud, vol.dt_ms)
            surfaces[f"{arch}_{view}"] = surface
            try:
                rep = evaluate(surface, truth)
                mae, mse, cov = rep.mae_ms, rep.mse_ms2, rep.coverage_pct
            except UndefinedMetricError:
                mae = mse = float("nan")
                cov = 0.0
            rows.append(dict(arch=arch, view=view, width=width, epochs=len(hist.records), best_epoch=best.epoch,
                             best_valid_iou=best.valid_iou, max_valid_iou=max(r.valid_iou for r in hist.records),
                             mae_ms=mae, mse_ms2=mse, coverage_pct=cov, points=len(cloud), train_cpu_s=train_s))
            log.info("%s %s: MAE %.3f ms, MSE %.3f, coverage %.2f%%", arch, view, mae, mse, cov)
    with open(out / "desk_results.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (format(v, ".6g") if isinstance(v, float) else v) for k, v in r.items()})
    export_depth_maps(surfaces, out / "maps")
    total = time.process_time() - t_cpu
    log.info("total %.1f CPU min", total / 60)
    return rows, total


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/desk")
    ap.add_argument("--arch", default="unet,cfa_unet")
    ap.add_argument("--width", type=int, default=16)
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--patience", type=int, default=30)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    rows, total = run(Path(args.out), args.arch.split(","), args.width, args.epochs, args.patience)
    for r in rows:
        print(f"{r['arch']:10s} {r['view']:9s} max valid IoU {r['max_valid_iou']:.3f}  MAE {r['mae_ms']:.3f} ms  "
              f"coverage {r['coverage_pct']:.2f}%")
    print(f"total {total / 60:.1f} CPU min")


if __name__ == "__main__":
    main()
