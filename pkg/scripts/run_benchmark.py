"""Multi-seed sweep of all methods on one config; one CSV row per (seed, method).

    python scripts/run_benchmark.py --config configs/default.yaml --seeds 5 --out sweep.csv
"""

import argparse
import csv
import sys
import time

from hetpfl import bench
from hetpfl.config import load_config


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default="configs/default.yaml")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--first-seed", type=int, default=0)
    p.add_argument("--set", action="append", default=[])
    p.add_argument("--out", default=None, help="CSV path (stdout when omitted)")
    args = p.parse_args(argv)

    fields = ["seed", "method", "self_last", "self_auc", "others_last", "others_auc", "weight_gap_r10", "seconds"]
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for seed in range(args.first_seed, args.first_seed + args.seeds):
        cfg = load_config(args.config, args.set + [f"seed={seed}"])
        env = bench.prepare(bench.generate_scenario(cfg))
        r10 = min(10, cfg.total_rounds) - 1
        for m in bench.METHODS:
            t = time.perf_counter()
            res = bench.run(env, m)
            gap = res.mean_weight_gap(r10, cfg.cluster_of) if res.rounds else float("nan")
            row = {"seed": seed, "method": m, **res.trace.summary(), "weight_gap_r10": gap,
                   "seconds": time.perf_counter() - t}
            w.writerow({k: f"{v:.4f}" if isinstance(v, float) else v for k, v in row.items()})
            fh.flush()
    if args.out:
        fh.close()


if __name__ == "__main__":
    main()
