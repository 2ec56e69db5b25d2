#!/usr/bin/env python3
"""The desk-scale input-dimension experiment, end to end.

Same image content at sizes 32 and 64 (pixel duplication adds no
information), same small dilated conv net family: the larger inputs carry
l1 loss gradients bigger by about sqrt of the dimension ratio and are
easier to attack, while the gradient-norm penalty buys that vulnerability
back at a small accuracy cost. The runs live in the artifact cache; this
script prints the story, writes the CSV bundles downstream tooling
consumes, and renders figures with plotkit when it is installed.

Configs here mirror tests/test_acceptance.py; keep the two in sync.

    python3 demos/dimension_story.py            # report from cached runs
    python3 demos/dimension_story.py --train    # train what is missing (hours)
"""

import argparse
import csv
import json
import math
import os
import shutil
import subprocess
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)),
                                os.pardir, "src"))

from gradlab import objectives as obj, training as tr  # noqa: E402

ART = os.path.join(os.path.dirname(os.path.abspath(__file__)),
                   os.pardir, "artifacts")


def desk(**over):
    kw = dict(arch="dilated8", channels=8, dataset="image", size=32,
              n_train=2000, n_test=500, classes=10, epochs=20, batch_size=32,
              optimizer="sgd", lr=0.02, momentum=0.9, seed=0,
              eval_n=200, eval_seed=1, eval_eps_inf=0.03, pgd_steps=7,
              attack_eval_every=2)
    kw.update(over)
    return tr.TrainConfig(**kw)


def penalty(eps):
    # eps stays below the attack budget: stronger penalties kill every relu
    # in the first epoch at this scale (see the gradient-penalty tests)
    return desk(size=64, upsample=2, epochs=12, attack_eval_every=4,
                objective=obj.ObjectiveSpec(kind="grad-penalty", eps_inf=eps))


OVERFIT = tr.TrainConfig(arch="mlp", widths=(256,), dataset="image", size=32,
                         n_train=2000, n_test=1000, classes=10, epochs=100,
                         batch_size=64, optimizer="sgd", lr=0.01, momentum=0.9,
                         seed=0, eval_n=400, eval_seed=1, eval_eps_inf=0.03,
                         pgd_steps=7, attack_eval_every=1)

PENALTY_EPS = (0.0003, 0.001, 0.003)


def window(hist, col, k=4, split="test"):
    rows = [r for r in hist if r["split"] == split and r["epoch"] >= 1]
    vals = [r[col] for r in rows[-k:] if math.isfinite(r[col])]
    return float(np.mean(vals))


def fetch(cfg, allow_train, log):
    run_dir = os.path.join(ART, cfg.run_id())
    if not os.path.exists(os.path.join(run_dir, "manifest.json")) \
            and not allow_train:
        raise SystemExit(
            f"run {cfg.run_id()} is not in {ART}; pass --train to build it "
            f"(the full set takes about two hours single-core)")
    return tr.cached_run(cfg, ART, log=log)


def write_rows(path, columns, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(columns)
        for r in rows:
            w.writerow(["%.17g" % r[c] if isinstance(r[c], float) else r[c]
                        for c in columns])


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--train", action="store_true",
                    help="train missing runs instead of refusing")
    ap.add_argument("--out", default=os.path.join(ART, "figures"))
    ap.add_argument("--quiet", action="store_true")
    args = ap.parse_args()
    log = None if args.quiet else lambda m: print("  " + m)

    plain = {s: fetch(desk(size=s, upsample=s // 32), args.train, log)
             for s in (32, 64)}
    pens = [(e, fetch(penalty(e), args.train, log)) for e in PENALTY_EPS]
    over = fetch(OVERFIT, args.train, log)

    print("\nsame content, twice the resolution:")
    print(f"{'size':>6} {'d':>7} {'acc':>7} {'E||dL/dx||_1':>13} {'vuln_pgd':>9}")
    g = {}
    for s, res in plain.items():
        g[s] = window(res.history, "g1")
        print(f"{s:>6} {3 * s * s:>7} {window(res.history, 'accuracy'):>7.3f} "
              f"{g[s]:>13.3f} {window(res.history, 'vuln_pgd', k=8):>9.3f}")
    print(f"l1 gradient ratio {g[64] / g[32]:.3f}; the dimension grew 4x, "
          f"so the sqrt law predicts 2")

    print("\nbuying robustness with the gradient-norm penalty (size 64):")
    print(f"{'penalty eps':>12} {'acc':>7} {'vuln_pgd':>9} {'E||dL/dx||_1':>13}")
    for e, res in pens:
        fin = res.final("test")
        print(f"{e:>12g} {fin['accuracy']:>7.3f} {fin['vuln_pgd']:>9.3f} "
              f"{window(res.history, 'g1'):>13.3f}")

    ratio = over.final("test")["g1"] / over.final("train")["g1"]
    print(f"\noverfit mlp: train g1 {over.final('train')['g1']:.4f} vs test "
          f"g1 {over.final('test')['g1']:.2f} (ratio {ratio:.0f}); memorized "
          f"points are flat, unseen ones are not")

    # -- csv bundles for downstream consumers -------------------------------
    out = args.out
    os.makedirs(out, exist_ok=True)
    rows = []
    for s, res in plain.items():
        rows.extend(r for r in res.history)
    tr.write_history(os.path.join(out, "combined.csv"), rows)
    with open(os.path.join(out, "sweep_manifest.json"), "w") as f:
        json.dump({"runs": [{"run_id": res.run_id, "dir": res.out_dir,
                             "knobs": {"size": s}}
                            for s, res in plain.items()]}, f, indent=1)

    write_rows(os.path.join(out, "tradeoff.csv"),
               ("knob", "run_id", "accuracy", "xent", "vuln_pgd",
                "vuln_fgsm", "dmgxent"),
               tr.tradeoff_curve([res for _, res in pens]))

    scaling = []
    for s, res in plain.items():
        vals = [r["g1"] for r in res.history
                if r["split"] == "test" and r["epoch"] >= 1][-4:]
        scaling.append({"d": 3 * s * s, "statistic": "final_window_g1",
                        "mean": float(np.mean(vals)),
                        "q10": float(np.quantile(vals, 0.10)),
                        "q90": float(np.quantile(vals, 0.90))})
    write_rows(os.path.join(out, "scaling.csv"),
               ("d", "statistic", "mean", "q10", "q90"), scaling)
    shutil.copy(os.path.join(over.out_dir, "history.csv"),
                os.path.join(out, "overfit_history.csv"))

    figures = [
        {"kind": "scaling", "inputs": [os.path.join(out, "scaling.csv")],
         "out": os.path.join(out, "scaling.png")},
        {"kind": "sweep-curves",
         "inputs": [os.path.join(out, "combined.csv"),
                    os.path.join(out, "sweep_manifest.json")],
         "out": os.path.join(out, "size_curves.png"),
         "metric": "g1", "x": "size", "window": 4},
        {"kind": "tradeoff", "inputs": [os.path.join(out, "tradeoff.csv")],
         "out": os.path.join(out, "tradeoff.png"),
         "xcol": "vuln_pgd", "ycol": "accuracy"},
        {"kind": "discrepancy",
         "inputs": [os.path.join(out, "overfit_history.csv")],
         "out": os.path.join(out, "discrepancy.png"), "metric": "g1"},
    ]
    spec_path = os.path.join(out, "figures.json")
    with open(spec_path, "w") as f:
        json.dump({"figures": figures}, f, indent=1)
    print(f"\nwrote csv bundles and figure spec to {out}")

    if shutil.which("plotkit"):
        print("rendering with plotkit:")
        subprocess.run(["plotkit", "--spec", spec_path], check=True)
    else:
        print(f"plotkit is not on PATH; install it and run: "
              f"plotkit --spec {spec_path}")


if __name__ == "__main__":
    main()
