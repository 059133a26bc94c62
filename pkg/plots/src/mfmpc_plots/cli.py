"""Batch figure tool: render figure-spec files into PNG/SVG images.

A spec file is YAML (or JSON) holding one figure description or a list of
them:

    kind: restart_cost
    inputs: {trace: runs/desk-two-gap_trace.csv}
    output: figures/stairs.png
    style: {title: parallel restarts}

Exit codes: 0 success, 1 bad spec or schema mismatch.
"""

from __future__ import annotations

import argparse
import os
import sys

import yaml

from .figures import FIGURE_KINDS, FigureSpec, render
from .io import SchemaError


def load_specs(path) -> list[FigureSpec]:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if isinstance(data, dict):
        data = [data]
    if not isinstance(data, list) or not data:
        raise ValueError(f"{path}: expected one figure spec or a list")
    specs = []
    for i, entry in enumerate(data):
        unknown = set(entry) - {"kind", "inputs", "output", "style"}
        if unknown:
            raise ValueError(f"{path}[{i}]: unknown keys {sorted(unknown)}")
        for key in ("kind", "inputs", "output"):
            if key not in entry:
                raise ValueError(f"{path}[{i}]: missing {key!r}")
        specs.append(FigureSpec(kind=entry["kind"], inputs=entry["inputs"],
                                output=entry["output"],
                                style=entry.get("style", {})))
    return specs


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(
        prog="mfmpc-plot",
        description="Render figures from mfmpc run artifacts "
                    f"(kinds: {', '.join(FIGURE_KINDS)})")
    ap.add_argument("specs", nargs="+", help="figure spec files (YAML/JSON)")
    args = ap.parse_args(argv)
    try:
        for path in args.specs:
            for spec in load_specs(path):
                out_dir = os.path.dirname(spec.output)
                if out_dir:
                    os.makedirs(out_dir, exist_ok=True)
                out = render(spec)
                print(out)
    except (ValueError, SchemaError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
