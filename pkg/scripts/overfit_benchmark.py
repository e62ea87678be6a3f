"""Single-patch overfit check for every architecture at its default learning rate.

    python3 scripts/overfit_benchmark.py [--width N] [--steps 300] [--arch unet,cfa_unet]

Prints the step at which the composite loss first drops below 0.05 and the
CPU time spent. Without --width each architecture uses its default width.
"""

import argparse
import time

from horizon_forge.architectures import ARCH_IDS, build_model
from horizon_forge.synthetics import SynthSpec, generate
from horizon_forge.trainer import default_config, fit_steps, slice_patches
from horizon_forge.volume_io import horizon_to_mask


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--width", type=int, default=None)
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--target", type=float, default=0.05)
    ap.add_argument("--arch", default=",".join(ARCH_IDS))
    ap.add_argument("--full-trace", action="store_true", help="keep stepping after the target is reached")
    args = ap.parse_args()

    vol, truth = generate(SynthSpec())
    mask = horizon_to_mask(truth, vol.shape, vol.dt_ms)
    x, y = slice_patches(vol.amplitudes[0], mask[0])[0]
    print(f"patch: first inline section, {y.mean():.2%} horizon pixels")
    print(f"{'arch':16s} {'width':>5s} {'lr':>8s} {'first<target':>12s} {'final':>8s} {'cpu_s':>7s}")
    for arch in args.arch.split(","):
        kw = {} if args.width is None else {"base_channels": args.width}
        cfg = default_config(arch, **kw)
        w = build_model(cfg.model_spec(), cfg.seed)
        t0 = time.process_time()
        trace = fit_steps(w, x, y, cfg, args.steps, None if args.full_trace else args.target)
        cpu = time.process_time() - t0
        first = next((i + 1 for i, v in enumerate(trace) if v < args.target), None)
        print(f"{arch:16s} {cfg.model_spec().base_channels:5d} {cfg.learning_rate:8g} {str(first):>12s} "
              f"{trace[-1]:8.4f} {cpu:7.1f}", flush=True)


if __name__ == "__main__":
    main()
