"""Per-batch accuracy during adaptation with its fitted linear trend, for each method.

    python scripts/batch_trace.py --model runs/source/source.bota --size 2048
"""

from __future__ import annotations

import argparse

from tta_bench.config import DatasetConfig, load_train_test
from tta_bench.corruptions import CorruptionSpec
from tta_bench.evaluation import batch_trace
from tta_bench.methods import METHOD_IDS, AdaptConfig
from tta_bench.model import load_model
from tta_bench.scenarios import make_target_domain, scenario1


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--model", required=True)
    p.add_argument("--size", type=int, default=2048)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--corruption", default="gaussian_noise")
    p.add_argument("--methods", nargs="*", default=list(METHOD_IDS))
    args = p.parse_args()

    _, test = load_train_test(DatasetConfig())
    d_t = make_target_domain(test, [CorruptionSpec(args.corruption, 5)], 11)
    split = scenario1(d_t, args.size, args.seed)
    model = load_model(args.model)
    for m in args.methods:
        trace, _ = batch_trace(m, model, split, AdaptConfig(seed=args.seed))
        accs = " ".join(f"{a:.2f}" for a in trace.accuracies)
        slope = "n/a" if trace.slope is None else f"{trace.slope:+.5f}"
        print(f"{m:5s} slope/batch {slope}  [{accs}]")


if __name__ == "__main__":
    main()
