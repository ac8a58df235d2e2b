"""Full model against the two ablation paths on the 200-asset synthetic benchmark.

    python scripts/run_ablation.py [--n 200] [--seed 0] [--out ablation.csv]

Prints one metrics row per method; lower CDs and higher IoU are better.
"""
import argparse
import logging
import time

from autorig import io
from autorig.ablation import BenchmarkConfig, run_benchmark, synthetic_benchmark


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    start = time.perf_counter()
    train, test = synthetic_benchmark(args.seed, args.n)
    res = run_benchmark(train, test, BenchmarkConfig(), args.seed)
    text = io.metrics_csv([(r["method"], r) for r in res.rows()])
    print(text, end="")
    print(f"# {len(train)} train / {len(test)} test assets, {time.perf_counter() - start:.0f}s")
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)


if __name__ == "__main__":
    main()
