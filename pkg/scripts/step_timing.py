"""Seconds per training step (forward + backward + Adam) for each architecture.

    python3 scripts/step_timing.py [--widths 16,64] [--steps 3]
"""

import argparse
import time

import numpy as np

from horizon_forge.architectures import ARCH_IDS, build_model
from horizon_forge.trainer import AdamState, default_config, train_step


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--widths", default="16,64")
    ap.add_argument("--steps", type=int, default=3)
    ap.add_argument("--arch", default=",".join(ARCH_IDS))
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    for width in (int(v) for v in args.widths.split(",")):
        for arch in args.arch.split(","):
            cfg = default_config(arch, base_channels=width)
            w = build_model(cfg.model_spec(), 0)
            x = rng.standard_normal((cfg.batch_size, 1, 128, 128)).astype(np.float32)
            y = (rng.random(x.shape) < 0.05).astype(np.float32)
            state = AdamState()
            train_step(w, state, x, y, cfg, rng)  # warm-up
            t0 = time.perf_counter()
            for _ in range(args.steps):
                train_step(w, state, x, y, cfg, rng)
            per = (time.perf_counter() - t0) / args.steps
            print(f"{arch:16s} width {width:3d} batch {cfg.batch_size}  {per:6.2f} s/step  "
                  f"{w.param_count() / 1e6:7.2f} M params", flush=True)


if __name__ == "__main__":
    main()
