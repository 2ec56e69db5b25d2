"""Readers for the artifact files figures are built from.

Column layouts are pinned here and checked before any value is used; a file
that does not match its schema is rejected, never coerced. The three CSV
layouts are the training history (also the sweep's combined file), the
scaling report, and the trade-off table; the one JSON input is the sweep
manifest mapping run ids to their config knobs.
"""

import csv
import json


HISTORY_COLUMNS = ("run_id", "epoch", "split", "accuracy", "xent", "g1", "g2",
                   "vuln_pgd", "vuln_fgsm", "dmg01", "dmgxent",
                   "dmgxent_over_eps")
SCALING_COLUMNS = ("d", "statistic", "mean", "q10", "q90")
TRADEOFF_COLUMNS = ("knob", "run_id", "accuracy", "xent", "vuln_pgd",
                    "vuln_fgsm", "dmgxent")


class SchemaMismatch(ValueError):
    """An input file's columns or structure differ from the pinned schema."""


class EmptySelection(ValueError):
    """A filter left nothing to plot."""


def _read_csv(path, columns, numeric):
    with open(path, newline="") as f:
        r = csv.DictReader(f)
        got = tuple(r.fieldnames or ())
        if got != columns:
            raise SchemaMismatch(
                f"{path}: columns {got} do not match the expected {columns}")
        rows = []
        for rec in r:
            row = dict(rec)
            for c in numeric:
                row[c] = float(row[c])
            rows.append(row)
    if not rows:
        raise EmptySelection(f"{path}: no data rows")
    return rows


def read_history(path):
    """Training history rows; also reads a sweep's combined file."""
    rows = _read_csv(path, HISTORY_COLUMNS, HISTORY_COLUMNS[3:])
    for r in rows:
        r["epoch"] = int(r["epoch"])
    return rows


def read_scaling(path):
    rows = _read_csv(path, SCALING_COLUMNS, ("d", "mean", "q10", "q90"))
    for r in rows:
        r["d"] = int(r["d"])
    return rows


def read_tradeoff(path):
    return _read_csv(path, TRADEOFF_COLUMNS,
                     tuple(c for c in TRADEOFF_COLUMNS if c != "run_id"))


def read_sweep_manifest(path):
    """The sweep manifest: run ids with the knob values that produced them."""
    with open(path) as f:
        man = json.load(f)
    runs = man.get("runs") if isinstance(man, dict) else None
    if not isinstance(runs, list) or not runs:
        raise SchemaMismatch(f"{path}: expected a 'runs' list")
    for entry in runs:
        if not isinstance(entry, dict) or "run_id" not in entry \
                or not isinstance(entry.get("knobs"), dict):
            raise SchemaMismatch(
                f"{path}: each run needs 'run_id' and a 'knobs' mapping")
    return man
