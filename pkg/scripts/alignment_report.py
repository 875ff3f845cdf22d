"""Per-layer alignment diagnostics for a config's model types.

    python scripts/alignment_report.py --config configs/default.yaml --seed 0
"""

import argparse
import dataclasses

from hetpfl import bench
from hetpfl.align import align_all
from hetpfl.cli import alignment_report_text
from hetpfl.config import load_config


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default="configs/default.yaml")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", action="append", default=[])
    args = p.parse_args(argv)

    cfg = dataclasses.replace(load_config(args.config, args.set), seed=args.seed)
    scn = bench.generate_scenario(cfg)
    models = bench.build_models(cfg)
    aligned, reports = align_all(models, bench.initial_adapters(cfg, models), scn.public, cfg.align)
    print(alignment_report_text(reports, bench.header(cfg)), end="")
    for k, ads in aligned.items():
        print(f"{k}: max PQ-LoRA orthonormality error {ads.pq_orthonormality_error():.2e}")


if __name__ == "__main__":
    main()
