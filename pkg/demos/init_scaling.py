#!/usr/bin/env python3
"""How the l1 gradient norm grows with input dimension at initialization.

Freshly He-initialized MLPs keep the squared per-coordinate logit gradient
near 1/d, so the l1 norm of the loss gradient, which sets the damage of a
max-norm attack, grows like sqrt(d). This script samples that curve and
fits the log-log slope.

    python3 demos/init_scaling.py --dims 64 256 1024 --seeds 8 --out /tmp/scal
"""

import argparse
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)),
                                os.pardir, "src"))

from gradlab import theory  # noqa: E402


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--dims", type=int, nargs="+",
                    default=[64, 256, 1024, 4096])
    ap.add_argument("--seeds", type=int, default=8, help="fresh nets per size")
    ap.add_argument("--inputs", type=int, default=16, help="draws per net")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--square", action="store_true",
                    help="hidden widths equal to d instead of fixed 64x64")
    ap.add_argument("--out", default=None, help="write scaling.csv/json here")
    args = ap.parse_args()

    widths = {d: ((d, d) if args.square else (64, 64)) for d in args.dims}
    specs = [theory.theory_mlp_spec(d, widths=widths[d]) for d in args.dims]
    print(f"sampling {args.seeds} nets x {args.inputs} inputs per size, "
          f"hidden widths {'d,d' if args.square else '64,64'}")
    rep = theory.grad_norm_scaling(specs, p=theory.INF, eps_inf=1.0,
                                   n_seeds=args.seeds, n_inputs=args.inputs,
                                   seed=args.seed)

    print(f"\n{'d':>6} {'E||dL/dx||_1':>14} {'q10':>10} {'q90':>10} {'/sqrt(d)':>10}")
    for d, m, lo, hi in zip(rep.dims, rep.means, rep.q10, rep.q90):
        print(f"{d:>6} {m:>14.4f} {lo:>10.4f} {hi:>10.4f} {m / np.sqrt(d):>10.4f}")
    print(f"\nlog-log slope {rep.slope:.4f} "
          f"(bootstrap 10/90: {rep.slope_q10:.4f}..{rep.slope_q90:.4f}), "
          f"prediction 0.5")
    print("the rightmost column is flat when the sqrt(d) law holds")

    if args.out:
        os.makedirs(args.out, exist_ok=True)
        rep.write_csv(os.path.join(args.out, "scaling.csv"))
        rep.write_json(os.path.join(args.out, "scaling.json"))
        print(f"\nwrote {args.out}/scaling.csv and scaling.json "
              f"(plotkit --spec can turn the csv into a figure)")


if __name__ == "__main__":
    main()
