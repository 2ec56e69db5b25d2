"""Command line front end.

Subcommands:
    verify-theory   run the built-in consistency checks (exit 0 iff all pass)
    attack          evaluate attacks against a trained checkpoint
    train           run one training config to completion
    sweep           run a grid of configs, optionally in parallel
    report          summarize finished runs into tables and CSV files

Every subcommand accepts --config FILE (JSON), --seed N (overrides the config
seed), --out DIR (artifact directory), and --jobs N (parallel workers, used
by sweep). Progress heartbeats go to stderr; results and PASS/FAIL lines go
to stdout.
"""

from __future__ import annotations

import argparse
import itertools
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import attacks, datasets, nn, objectives as obj, theory, training as tr


def _hb(msg: str):
    stamp = time.strftime("%H:%M:%S")
    print(f"[{stamp}] {msg}", file=sys.stderr, flush=True)


def _load_config(path) -> dict:
    if path is None:
        return {}
    with open(path) as f:
        try:
            cfg = json.load(f)
        except json.JSONDecodeError as e:
            raise SystemExit(f"--config {path}: invalid JSON: {e}")
    if not isinstance(cfg, dict):
        raise SystemExit(f"--config {path} must hold a JSON object")
    return cfg


def _write_json(out_dir, name, payload):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=_json_default)
        f.write("\n")
    return path


def _json_default(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(f"not JSON serializable: {type(v)}")


def _write_csv(out_dir, name, columns, rows):
    import csv

    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(columns)
        for row in rows:
            w.writerow([("%.17g" % row[c]) if isinstance(row[c], float)
                        else row[c] for c in columns])
    return path


# -- verify-theory -----------------------------------------------------------------


def _check_path_mass(cfg):
    n = int(cfg.get("n_specs", 50))
    rng = np.random.default_rng(int(cfg.get("seed", 0)))
    worst = 0.0
    for _ in range(n):
        spec = theory.random_mass_spec(rng)
        dag = theory.PathDag.from_spec(spec)
        k = dag.mass_matrix().shape[1]
        for j in range(k):
            worst = max(worst, abs(dag.total_mass(j) - 1.0))
    return worst < 1e-9, f"{n} random layer stacks, worst |mass - 1| = {worst:.3g}"


def _check_enumeration(cfg):
    spec = theory.theory_mlp_spec(6, (5, 4), 3)
    dag = theory.PathDag.from_spec(spec)
    m = dag.mass_matrix()
    worst = 0.0
    for i, k in ((0, 0), (3, 1), (5, 2)):
        worst = max(worst, abs(dag.enumerate_mass(i, k) - m[i, k]))
    return worst < 1e-12, f"explicit path walk vs matrix product, worst gap = {worst:.3g}"


def _check_pool_pair(cfg):
    pooled, strided = theory.avgpool_theory_pair(h=4)
    mp = theory.PathDag.from_spec(pooled).total_mass(0)
    ms = theory.PathDag.from_spec(strided).total_mass(0)
    ratio = mp / ms
    return abs(ratio - 1.0 / 16.0) < 1e-9, (
        f"averaging pair passes {ratio:.6f} of the strided mass (want 1/16)")


def _check_mc_moments(cfg):
    stats = theory.mc_logit_grad_stats(theory.theory_mlp_spec(12, (16, 16), 4),
                                       n_nets=15, n_inputs=6,
                                       seed=int(cfg.get("seed", 0)))
    m = stats["total_mass_mean"]
    return 0.7 < m < 1.3, f"sampled squared-gradient mass {m:.3f} (predicted 1)"


def _check_decorrelation(cfg):
    a = ((0, 1.0), (1, 0.5))
    b = ((2, 1.0), (3, 0.5))
    r = theory.mc_path_products(a, b, n_samples=20000,
                                seed=int(cfg.get("seed", 0)))
    gap = abs(r["mean_ab"] - r["expected_ab"])
    return gap < 4 * r["se_ab"], (
        f"disjoint path product off by {gap:.2e} ({gap / max(r['se_ab'], 1e-300):.2f} se)")


def _check_scaling_slope(cfg):
    dims = tuple(cfg.get("dims", (16, 64, 256)))
    specs = [theory.theory_mlp_spec(d, (24, 24), 10) for d in dims]
    rep = theory.grad_norm_scaling(specs, p=math.inf, n_seeds=4, n_inputs=8,
                                   seed=int(cfg.get("seed", 0)), n_boot=100)
    ok = 0.4 < rep.slope < 0.6
    out = cfg.get("_out")
    if out:
        rep.write_csv(os.path.join(out, "scaling.csv"))
        rep.write_json(os.path.join(out, "scaling.json"))
    return ok, (f"damage grows as d^{rep.slope:.3f} over d in {dims} "
                f"(want 0.5 within [0.4, 0.6])")


def _check_duality_gap(cfg):
    rng = np.random.default_rng(int(cfg.get("seed", 0)))
    spec = nn.mlp_spec(10, (), 4)
    net = nn.he_init(spec, seed=3)
    x = rng.standard_normal(10)
    gaps = [obj.duality_gap(net, x, 1, eps, math.inf) for eps in (4e-3, 2e-3)]
    ratio = gaps[0] / gaps[1]
    return 3.5 < ratio < 4.5, (
        f"gap ratio {ratio:.3f} when the threshold halves (want near 4)")


_THEORY_CHECKS = (
    ("path-mass", _check_path_mass),
    ("enumeration", _check_enumeration),
    ("pool-pair", _check_pool_pair),
    ("mc-moments", _check_mc_moments),
    ("decorrelation", _check_decorrelation),
    ("scaling-slope", _check_scaling_slope),
    ("duality-gap", _check_duality_gap),
)


def cmd_verify_theory(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        cfg["_out"] = args.out
    results = []
    for name, fn in _THEORY_CHECKS:
        _hb(f"checking {name}")
        ok, detail = fn(cfg)
        results.append({"check": name, "ok": bool(ok), "detail": detail})
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    n_bad = sum(not r["ok"] for r in results)
    if args.out:
        _write_json(args.out, "verify_theory.json",
                    {"results": results, "failures": n_bad})
    print(f"{len(results) - n_bad}/{len(results)} checks passed")
    return 0 if n_bad == 0 else 1


# -- train -------------------------------------------------------------------------


def _train_config(cfg_dict, seed) -> tr.TrainConfig:
    cfg = tr.TrainConfig.from_dict(cfg_dict) if cfg_dict else tr.TrainConfig()
    if seed is not None:
        d = cfg.to_dict()
        d["seed"] = seed
        cfg = tr.TrainConfig.from_dict(d)
    return cfg


def cmd_train(args) -> int:
    cfg = _train_config(_load_config(args.config), args.seed)
    out = args.out or os.path.join("runs", cfg.run_id())
    _hb(f"training {cfg.run_id()} -> {out}")
    res = tr.train(cfg, out, log=_hb)
    final = res.final("test")
    print(f"run {res.run_id} {'ABORTED' if res.aborted else 'done'}: "
          f"test accuracy {final['accuracy']:.4f}, xent {final['xent']:.4f}, "
          f"vuln_pgd {final['vuln_pgd']:.4f}")
    print(f"artifacts in {res.out_dir}")
    return 0


# -- sweep -------------------------------------------------------------------------


def _apply_knob(d: dict, dotted: str, value):
    parts = dotted.split(".")
    cur = d
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value


def _sweep_worker(payload):
    cfg_dict, out_dir = payload
    cfg = tr.TrainConfig.from_dict(cfg_dict)
    res = tr.train(cfg, out_dir)
    return {"run_id": res.run_id, "dir": out_dir, "aborted": res.aborted,
            "final_test": {k: v for k, v in res.final("test").items()
                           if k != "run_id"}}


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    base = cfg.get("base", {})
    grid = cfg.get("grid", {})
    if args.seed is not None:
        base["seed"] = args.seed
    out = args.out or "sweep"
    os.makedirs(out, exist_ok=True)

    keys = sorted(grid)
    combos = list(itertools.product(*(grid[k] for k in keys))) or [()]
    jobs = []
    for combo in combos:
        d = json.loads(json.dumps(base))  # deep copy
        knobs = dict(zip(keys, combo))
        for k, v in knobs.items():
            _apply_knob(d, k, v)
        run_cfg = tr.TrainConfig.from_dict(d)
        run_dir = os.path.join(out, run_cfg.run_id())
        jobs.append((run_cfg.to_dict(), run_dir, knobs))

    _hb(f"sweep: {len(jobs)} runs, {args.jobs} worker(s)")
    payloads = [(d, rd) for d, rd, _ in jobs]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            outcomes = list(pool.map(_sweep_worker, payloads))
    else:
        outcomes = []
        for i, payload in enumerate(payloads):
            _hb(f"run {i + 1}/{len(payloads)}")
            outcomes.append(_sweep_worker(payload))

    rows = []
    for (cfg_dict, run_dir, knobs), outcome in zip(jobs, outcomes):
        outcome["knobs"] = knobs
        rows.extend(tr.read_history(os.path.join(run_dir, "history.csv")))
        acc = outcome["final_test"]["accuracy"]
        print(f"run {outcome['run_id']} knobs {knobs} "
              f"acc {acc:.4f} vuln_pgd {outcome['final_test']['vuln_pgd']:.4f}"
              f"{' ABORTED' if outcome['aborted'] else ''}")
    tr.write_history(os.path.join(out, "combined.csv"), rows)
    _write_json(out, "sweep_manifest.json",
                {"base": base, "grid": grid, "runs": outcomes})
    print(f"sweep artifacts in {out}")
    return 0


# -- attack ------------------------------------------------------------------------


_ATTACK_COLUMNS = ("method", "p", "eps_inf", "eps_p", "n", "acc_clean",
                   "acc_adv", "dmg01", "dmgxent", "flip_rate",
                   "mean_delta_norm")


def _parse_p(v):
    return math.inf if v in ("inf", None) else float(v)


def cmd_attack(args) -> int:
    cfg = _load_config(args.config)
    if "run" in cfg:
        with open(os.path.join(cfg["run"], "manifest.json")) as f:
            manifest = json.load(f)
        run_cfg = tr.TrainConfig.from_dict(manifest["config"])
        net = nn.Network.load(os.path.join(cfg["run"], "final.ckpt"))
    elif "checkpoint" in cfg:
        net = nn.Network.load(cfg["checkpoint"])
        run_cfg = tr.TrainConfig.from_dict(cfg.get("dataset", {}))
    else:
        raise SystemExit("attack config needs a 'run' directory or a 'checkpoint' path")
    _, test_ds = tr.resolve_data(run_cfg)
    n = int(cfg.get("n", 200))
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    sub = test_ds.take(min(n, test_ds.n), seed=seed)

    specs = cfg.get("attacks", [{"method": "fgsm", "eps_inf": 0.01},
                                {"method": "pgd", "eps_inf": 0.01}])
    rows = []
    for s in specs:
        spec = attacks.AttackSpec(method=s["method"], p=_parse_p(s.get("p")),
                                  eps_inf=float(s.get("eps_inf", 0.01)),
                                  steps=int(s.get("steps", 7)), seed=seed)
        _hb(f"attacking with {spec.method} (eps_inf {spec.eps_inf})")
        v = attacks.vulnerability(net, sub.x, sub.y, spec)
        row = {"method": spec.method,
               "p": "inf" if math.isinf(spec.p) else spec.p,
               "eps_inf": spec.eps_inf,
               "eps_p": v["eps_p"] if v["eps_p"] is not None else float("nan"),
               "n": v["n"], "acc_clean": v["acc_clean"],
               "acc_adv": v["acc_adv"], "dmg01": v["dmg01"],
               "dmgxent": v["dmgxent"], "flip_rate": v["flip_rate"],
               "mean_delta_norm": v["mean_delta_norm"]}
        rows.append(row)
        print(f"{spec.method:10s} clean acc {row['acc_clean']:.4f} -> "
              f"adv acc {row['acc_adv']:.4f}, flip rate {row['flip_rate']:.4f}")
    if args.out:
        _write_csv(args.out, "attack.csv", _ATTACK_COLUMNS, rows)
        _write_json(args.out, "attack.json", {"rows": rows, "n": n,
                                              "seed": seed})
        print(f"attack artifacts in {args.out}")
    return 0


# -- report ------------------------------------------------------------------------


def _run_dirs(cfg) -> list:
    if "runs" in cfg:
        return list(cfg["runs"])
    if "sweep" in cfg:
        with open(os.path.join(cfg["sweep"], "sweep_manifest.json")) as f:
            manifest = json.load(f)
        return [r["dir"] for r in manifest["runs"]]
    raise SystemExit("report config needs 'runs' (list of dirs) or 'sweep' (dir)")


def cmd_report(args) -> int:
    cfg = _load_config(args.config)
    entries = []
    tradeoff = []
    for rd in _run_dirs(cfg):
        with open(os.path.join(rd, "manifest.json")) as f:
            manifest = json.load(f)
        history = tr.read_history(os.path.join(rd, "history.csv"))
        view = tr.early_stopping_view(history)
        run_cfg = tr.TrainConfig.from_dict(manifest["config"])
        final = manifest["final_test"]
        entries.append({"run_id": manifest["run_id"], "dir": rd,
                        "aborted": manifest["aborted"],
                        "early_stopping": view, "final_test": final})
        tradeoff.append({"knob": run_cfg.objective.eps_inf,
                         "run_id": manifest["run_id"],
                         "accuracy": final["accuracy"], "xent": final["xent"],
                         "vuln_pgd": final["vuln_pgd"],
                         "vuln_fgsm": final["vuln_fgsm"],
                         "dmgxent": final["dmgxent"]})
        print(f"run {manifest['run_id']}: acc {final['accuracy']:.4f} "
              f"xent {final['xent']:.4f} vuln_pgd {final['vuln_pgd']:.4f} "
              f"(best epoch {view['best_epoch']}, final {view['final_epoch']})")
        if cfg.get("eps_list"):
            net = nn.Network.load(os.path.join(rd, "final.ckpt"))
            _, test_ds = tr.resolve_data(run_cfg)
            sub = test_ds.take(min(int(cfg.get("n", 128)), test_ds.n),
                               seed=run_cfg.eval_seed)
            rows = tr.discrepancy_report(net, sub, cfg["eps_list"])
            entries[-1]["discrepancy"] = rows
            for r in rows:
                print(f"  eps {r['eps_inf']:g}: measured/predicted damage "
                      f"= {r['ratio']:.3f}")
    tradeoff.sort(key=lambda r: r["knob"])
    if args.out:
        _write_json(args.out, "report.json", {"runs": entries})
        _write_csv(args.out, "tradeoff.csv",
                   ("knob", "run_id", "accuracy", "xent", "vuln_pgd",
                    "vuln_fgsm", "dmgxent"), tradeoff)
        print(f"report artifacts in {args.out}")
    return 0


# -- argument parsing ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gradlab", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)
    handlers = {"verify-theory": cmd_verify_theory, "attack": cmd_attack,
                "train": cmd_train, "sweep": cmd_sweep, "report": cmd_report}
    for name, fn in handlers.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", default=None, help="artifact directory")
        p.add_argument("--jobs", type=int, default=1,
                       help="parallel workers (sweep)")
        p.set_defaults(fn=fn)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
