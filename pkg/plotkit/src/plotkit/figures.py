"""The four figure kinds and the aggregation rules they share.

scaling      gradient norm against input dimension, log-log, fitted slope.
sweep-curves one point per trained run (median of the last epochs, 10/90
             quantile bars) against the swept knob, one curve per group.
tradeoff     final accuracy against final vulnerability across a sweep.
discrepancy  train and test curves of one metric over epochs for one run.

render() writes the image plus a sidecar JSON at <out>.json containing every
plotted number, the settings that produced them, and the input paths. Inputs
are only ever read. Rendering is deterministic: fixed dpi, no timestamps in
the output metadata, and a fixed hash salt for SVG element ids.
"""

import json
import math
import os
from dataclasses import dataclass, fields

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "plotkit"

import matplotlib.pyplot as plt
import numpy as np

from . import schema
from .schema import EmptySelection, SchemaMismatch

_KINDS = ("scaling", "sweep-curves", "tradeoff", "discrepancy")
_FORMATS = ("png", "svg")
_SCALES = ("linear", "log")
# per-kind (xscale, yscale) used when the spec leaves them blank
_DEFAULT_SCALES = {"scaling": ("log", "log"), "sweep-curves": ("log", "linear"),
                   "tradeoff": ("linear", "linear"),
                   "discrepancy": ("linear", "linear")}


@dataclass(frozen=True)
class FigureSpec:
    """One figure: what kind, from which files, to which image."""

    kind: str
    inputs: tuple
    out: str
    format: str = ""        # png | svg; blank infers from the out extension
    xscale: str = ""        # linear | log; blank takes the kind's default
    yscale: str = ""
    metric: str = "g1"      # y column for sweep-curves and discrepancy
    split: str = "test"     # history rows used by sweep-curves / discrepancy
    window: int = 20        # last-k epochs a sweep point aggregates over
    smooth: float = 0.0     # EMA weight for discrepancy curves, 0 = off
    x: str = ""             # sweep knob on the x axis; blank = the only knob
    group: str = ""         # optional knob giving one curve per value
    run_id: str = ""        # discrepancy row filter for multi-run files
    xcol: str = "vuln_pgd"  # tradeoff axes
    ycol: str = "accuracy"

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown kind {self.kind!r}, expected one of {_KINDS}")
        object.__setattr__(self, "inputs", tuple(self.inputs))
        if not self.inputs:
            raise ValueError("inputs must name at least one file")
        fmt = self.format or os.path.splitext(self.out)[1].lstrip(".").lower()
        if fmt not in _FORMATS:
            raise ValueError(f"format {fmt!r} not in {_FORMATS}")
        object.__setattr__(self, "format", fmt)
        for name in ("xscale", "yscale"):
            v = getattr(self, name)
            if v and v not in _SCALES:
                raise ValueError(f"{name} must be one of {_SCALES}, got {v!r}")
        if not 0.0 <= self.smooth < 1.0:
            raise ValueError(f"smooth must lie in [0, 1), got {self.smooth}")
        if self.window < 1:
            raise ValueError("window must be >= 1")

    def scales(self):
        dx, dy = _DEFAULT_SCALES[self.kind]
        return self.xscale or dx, self.yscale or dy

    @staticmethod
    def from_dict(d: dict) -> "FigureSpec":
        known = {f.name for f in fields(FigureSpec)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown figure spec keys {sorted(extra)}")
        return FigureSpec(**d)


def ema(values, weight):
    """Exponential moving average with the convention s_0 = v_0."""
    out = np.empty(len(values))
    run = values[0]
    for i, v in enumerate(values):
        run = weight * run + (1.0 - weight) * v
        out[i] = run
    return out


def _finite(values):
    arr = np.asarray(values, dtype=float)
    return arr[np.isfinite(arr)]


def _split_rows(rows, run_id, split):
    sel = [r for r in rows if r["run_id"] == run_id and r["split"] == split]
    sel.sort(key=lambda r: r["epoch"])
    return sel


def _save(fig, spec):
    # no dates or tool names in the output, so repeated renders match bytewise
    meta = {"Date": None} if spec.format == "svg" else {"Software": None}
    fig.savefig(spec.out, format=spec.format, metadata=meta, dpi=100)
    plt.close(fig)


def _write_sidecar(spec, payload):
    payload = dict(payload)
    payload["figure"] = {"kind": spec.kind, "inputs": list(spec.inputs),
                         "out": spec.out, "format": spec.format,
                         "xscale": spec.scales()[0],
                         "yscale": spec.scales()[1]}
    path = spec.out + ".json"
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    return payload


# -- the kinds ---------------------------------------------------------------------


def _render_scaling(spec):
    if len(spec.inputs) != 1:
        raise ValueError("scaling takes exactly one scaling-report CSV")
    rows = schema.read_scaling(spec.inputs[0])
    rows = sorted(rows, key=lambda r: r["d"])
    d = np.array([r["d"] for r in rows], dtype=float)
    mean = np.array([r["mean"] for r in rows])
    q10 = np.array([r["q10"] for r in rows])
    q90 = np.array([r["q90"] for r in rows])
    if np.any(mean <= 0):
        raise ValueError("scaling means must be positive for a log-log plot")

    slope = None
    if len(d) >= 2:
        slope = float(np.polyfit(np.log(d), np.log(mean), 1)[0])

    fig, ax = plt.subplots(figsize=(5, 4))
    ax.errorbar(d, mean, yerr=np.vstack([mean - q10, q90 - mean]), marker="o",
                capsize=3)
    xs, ys = spec.scales()
    ax.set_xscale(xs)
    ax.set_yscale(ys)
    ax.set_xlabel("input dimension")
    ax.set_ylabel(rows[0]["statistic"])
    if slope is not None:
        ax.set_title(f"slope {slope:.3f}")
    fig.tight_layout()
    _save(fig, spec)
    return _write_sidecar(spec, {
        "statistic": rows[0]["statistic"], "d": [int(v) for v in d],
        "mean": mean.tolist(), "q10": q10.tolist(), "q90": q90.tolist(),
        "slope": slope})


def _sweep_inputs(spec):
    csvs = [p for p in spec.inputs if p.endswith(".csv")]
    jsons = [p for p in spec.inputs if p.endswith(".json")]
    if len(csvs) != 1 or len(jsons) != 1:
        raise ValueError("sweep-curves takes one combined CSV plus one "
                         "sweep manifest JSON")
    return schema.read_history(csvs[0]), schema.read_sweep_manifest(jsons[0])


def _knob_key(spec, runs):
    if spec.x:
        return spec.x
    keys = sorted({k for r in runs for k in r["knobs"]} - {spec.group})
    if len(keys) != 1:
        raise ValueError(f"x knob is ambiguous, pick one of {keys}")
    return keys[0]


def _window_point(rows, metric, window):
    vals = _finite([r[metric] for r in rows[-window:]])
    if vals.size == 0:
        return None
    q10, med, q90 = np.quantile(vals, [0.1, 0.5, 0.9])
    return {"median": float(med), "q10": float(q10), "q90": float(q90),
            "n": int(vals.size)}


def _render_sweep_curves(spec):
    history, man = _sweep_inputs(spec)
    runs = man["runs"]
    if spec.metric not in schema.HISTORY_COLUMNS[3:]:
        raise ValueError(f"metric {spec.metric!r} is not a history column")
    xkey = _knob_key(spec, runs)

    curves = {}
    skipped = []
    for entry in runs:
        rid = entry["run_id"]
        if xkey not in entry["knobs"]:
            raise ValueError(f"run {rid} lacks knob {xkey!r}")
        rows = _split_rows(history, rid, spec.split)
        if not rows:
            skipped.append(rid)
            continue
        point = _window_point(rows, spec.metric, spec.window)
        if point is None:
            skipped.append(rid)
            continue
        gval = entry["knobs"].get(spec.group, "") if spec.group else ""
        point = dict(point, x=entry["knobs"][xkey], run_id=rid)
        curves.setdefault(gval, []).append(point)
    if not curves:
        raise EmptySelection(
            f"no finite {spec.metric!r} values for split {spec.split!r}")

    fig, ax = plt.subplots(figsize=(5, 4))
    for gval in sorted(curves):
        pts = sorted(curves[gval], key=lambda p: p["x"])
        curves[gval] = pts
        x = [p["x"] for p in pts]
        med = np.array([p["median"] for p in pts])
        lo = med - np.array([p["q10"] for p in pts])
        hi = np.array([p["q90"] for p in pts]) - med
        label = f"{spec.group}={gval}" if spec.group else None
        ax.errorbar(x, med, yerr=np.vstack([lo, hi]), marker="o", capsize=3,
                    label=label)
    xs, ys = spec.scales()
    ax.set_xscale(xs)
    ax.set_yscale(ys)
    ax.set_xlabel(xkey)
    ax.set_ylabel(spec.metric)
    if spec.group:
        ax.legend()
    fig.tight_layout()
    _save(fig, spec)
    return _write_sidecar(spec, {
        "metric": spec.metric, "split": spec.split, "window": spec.window,
        "x_knob": xkey, "group_knob": spec.group or None,
        "curves": curves, "skipped_runs": skipped})


def _render_tradeoff(spec):
    if len(spec.inputs) != 1:
        raise ValueError("tradeoff takes exactly one trade-off CSV")
    rows = schema.read_tradeoff(spec.inputs[0])
    for col in (spec.xcol, spec.ycol):
        if col not in schema.TRADEOFF_COLUMNS or col == "run_id":
            raise ValueError(f"{col!r} is not a numeric trade-off column")
    rows = sorted(rows, key=lambda r: r["knob"])
    x = [r[spec.xcol] for r in rows]
    y = [r[spec.ycol] for r in rows]

    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(x, y, marker="o")
    for r in rows:
        ax.annotate(f"{r['knob']:g}", (r[spec.xcol], r[spec.ycol]),
                    textcoords="offset points", xytext=(4, 4), fontsize=8)
    xs, ys = spec.scales()
    ax.set_xscale(xs)
    ax.set_yscale(ys)
    ax.set_xlabel(spec.xcol)
    ax.set_ylabel(spec.ycol)
    fig.tight_layout()
    _save(fig, spec)
    return _write_sidecar(spec, {
        "xcol": spec.xcol, "ycol": spec.ycol,
        "knob": [r["knob"] for r in rows], "x": x, "y": y,
        "run_id": [r["run_id"] for r in rows]})


def _render_discrepancy(spec):
    if len(spec.inputs) != 1:
        raise ValueError("discrepancy takes exactly one history CSV")
    rows = schema.read_history(spec.inputs[0])
    if spec.metric not in schema.HISTORY_COLUMNS[3:]:
        raise ValueError(f"metric {spec.metric!r} is not a history column")
    ids = sorted({r["run_id"] for r in rows})
    rid = spec.run_id
    if not rid:
        if len(ids) != 1:
            raise ValueError(f"file holds runs {ids}; set run_id to pick one")
        rid = ids[0]
    elif rid not in ids:
        raise EmptySelection(f"run_id {rid!r} not in file (has {ids})")

    series = {}
    for split in ("train", "test"):
        sel = [(r["epoch"], r[spec.metric]) for r in _split_rows(rows, rid, split)
               if math.isfinite(r[spec.metric])]
        if not sel:
            raise EmptySelection(
                f"no finite {spec.metric!r} rows for split {split!r}")
        epochs = [e for e, _ in sel]
        vals = np.array([v for _, v in sel])
        plotted = ema(vals, spec.smooth) if spec.smooth else vals
        series[split] = {"epochs": epochs, "values": plotted.tolist(),
                         "raw": vals.tolist()}

    fig, ax = plt.subplots(figsize=(5, 4))
    for split, s in series.items():
        ax.plot(s["epochs"], s["values"], marker=".", label=split)
    ratio = series["test"]["values"][-1] / series["train"]["values"][-1]
    ax.set_title(f"final test/train = {ratio:.3f}")
    xs, ys = spec.scales()
    ax.set_xscale(xs)
    ax.set_yscale(ys)
    ax.set_xlabel("epoch")
    ax.set_ylabel(spec.metric)
    ax.legend()
    fig.tight_layout()
    _save(fig, spec)
    return _write_sidecar(spec, {
        "metric": spec.metric, "run_id": rid, "smooth": spec.smooth,
        "series": series, "final_ratio": ratio})


_RENDERERS = {"scaling": _render_scaling, "sweep-curves": _render_sweep_curves,
              "tradeoff": _render_tradeoff, "discrepancy": _render_discrepancy}


def render(spec: FigureSpec) -> dict:
    """Render one figure; returns the sidecar payload that was written."""
    out_dir = os.path.dirname(os.path.abspath(spec.out))
    os.makedirs(out_dir, exist_ok=True)
    return _RENDERERS[spec.kind](spec)
