"""Full pipeline trained with and without pose augmentation on the synthetic benchmark.

    python scripts/run_augmentation_ablation.py [--n 200] [--seed 0]

Both runs share the split, seeds and every other setting; only the ArAE's
pose augmentation differs.
"""
import argparse
import logging
import time

from autorig import io
from autorig.ablation import BenchmarkConfig, desk_pipeline_config, run_benchmark, synthetic_benchmark


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    train, test = synthetic_benchmark(args.seed, args.n)
    rows = []
    for augment in (True, False):
        start = time.perf_counter()
        cfg = BenchmarkConfig(pipeline=desk_pipeline_config(augment=augment))
        res = run_benchmark(train, test, cfg, args.seed, methods=("full",))
        label = "with_pose_aug" if augment else "without_pose_aug"
        rows.append((label, res.reports["full"].as_dict()))
        logging.info("%s done in %.0fs", label, time.perf_counter() - start)
    print(io.metrics_csv(rows), end="")


if __name__ == "__main__":
    main()
