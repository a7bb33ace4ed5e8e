"""Median PSNR and source-model accuracy per corruption and severity.

Used to pick the strengths in severity_tables.json: PSNR must fall strictly
with severity, and severity 5 should leave the source model well above chance
but far below its clean accuracy.

    python scripts/calibrate_severity.py --model runs/source/source.bota
"""

from __future__ import annotations

import argparse

import numpy as np

from tta_bench.corruptions import CORRUPTIONS, SEVERITIES, CorruptionSpec, apply_corruption, psnr
from tta_bench.data import generate_synthshapes
from tta_bench.evaluation import accuracy
from tta_bench.model import load_model
from tta_bench.scenarios import make_target_domain


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--model", help="source model; omit to print PSNR only")
    p.add_argument("--per-class", type=int, default=50)
    args = p.parse_args()
    clean = generate_synthshapes(10, args.per_class, seed=2)
    model = load_model(args.model) if args.model else None
    if model is not None:
        print(f"clean accuracy {accuracy(model, clean).xi:.3f}")
    for tau in sorted(CORRUPTIONS):
        cells = []
        for mu in SEVERITIES:
            spec = CorruptionSpec(tau, mu)
            med = np.median([psnr(x, apply_corruption(x, spec, i)) for i, x in enumerate(clean.images[:32])])
            cell = f"{med:5.1f}dB"
            if model is not None:
                cell += f"/{accuracy(model, make_target_domain(clean, [spec], 11)).xi:.2f}"
            cells.append(cell)
        print(f"{tau:15s} " + "  ".join(cells))


if __name__ == "__main__":
    main()
