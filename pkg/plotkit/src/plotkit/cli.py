"""Command line entry point.

    plotkit --spec figures.json

The spec file is JSON holding either a single figure object or
{"figures": [...]}. Each object carries FigureSpec fields: kind, inputs,
out, and the optional knobs (format, xscale/yscale, metric, split, window,
smooth, x, group, run_id, xcol/ycol).
"""

import argparse
import json
import sys

from . import figures


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="plotkit", description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--spec", required=True, help="JSON figure spec file")
    args = ap.parse_args(argv)

    try:
        with open(args.spec) as f:
            raw = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        print(f"cannot read spec file: {e}", file=sys.stderr)
        return 2
    if isinstance(raw, dict) and "figures" in raw:
        entries = raw["figures"]
    else:
        entries = [raw]
    if not isinstance(entries, list) or not entries \
            or not all(isinstance(e, dict) for e in entries):
        print('spec must be a figure object or {"figures": [...]}',
              file=sys.stderr)
        return 2

    for i, entry in enumerate(entries):
        try:
            spec = figures.FigureSpec.from_dict(entry)
            figures.render(spec)
        except (ValueError, OSError) as e:
            print(f"figure {i}: {e}", file=sys.stderr)
            return 1
        print(f"wrote {spec.out} and {spec.out}.json")
    return 0


if __name__ == "__main__":
    sys.exit(main())
