"""Command line: ``hetpfl {generate,align,run,check}``.

A workspace directory (``--out``) holds everything one experiment produces::

    <out>/scenario/      config.yaml, data.npz, scenario.json
    <out>/checkpoints/   adapters_<type>.safetensors, alignment_report.{json,txt}
    <out>/results/       trace_<method>.csv, summary_<method>.json,
                         clients_<method>.jsonl, rounds_<method>.jsonl,
                         comparison.{csv,txt}

Exit codes: 0 success, 1 property failure or incomplete run, 2 usage or
config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import bench, checks
from .adapter import load_adapters, save_adapters
from .align import align_all
from .config import ConfigError, ExperimentConfig, config_from_dict, load_config

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("hetpfl")


class UsageError(Exception):
    pass


def _layout(out: str | Path) -> tuple[Path, Path, Path]:
    root = Path(out)
    return root / "scenario", root / "checkpoints", root / "results"


def _load_scenario(scn_dir: Path) -> bench.Scenario:
    if not (scn_dir / "scenario.json").exists():
        raise UsageError(f"no scenario at {scn_dir}; run 'hetpfl generate' first")
    return bench.load_scenario(scn_dir)


def _check_seed(args, scn: bench.Scenario) -> None:
    if args.seed is not None and args.seed != scn.cfg.seed:
        raise UsageError(f"--seed {args.seed} differs from the scenario seed {scn.cfg.seed}; regenerate instead")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# -- generate ----------------------------------------------------------------------


def cmd_generate(args) -> int:
    if not args.config:
        raise UsageError("generate needs --config")
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    scn_dir, _, _ = _layout(args.out)
    if (scn_dir / "scenario.json").exists() and not args.force:
        existing = json.loads((scn_dir / "scenario.json").read_text())
        print(f"scenario already present at {scn_dir} (fingerprint {existing['fingerprint']}); use --force to replace")
        return EXIT_OK
    fp = bench.save_scenario(bench.generate_scenario(cfg), scn_dir)
    print(f"fingerprint {fp}")
    print(f"config_hash {cfg.digest()} seed {cfg.seed}")
    return EXIT_OK


# -- align -------------------------------------------------------------------------


def alignment_report_text(reports, hdr: dict) -> str:
    lines = [f"# config_hash={hdr['config_hash']} seed={hdr['seed']}"]
    if not reports:
        lines.append("single model type: nothing to align")
    else:
        lines.append(f"{'type':<10}{'block':>6}{'layers':>9}{'A gap pre':>12}{'A gap post':>12}{'ratio':>8}"
                     f"{'B cka pre':>11}{'B cka post':>12}")
        for r in reports:
            lines.append(f"{r.model_type:<10}{r.block:>6}{f'{r.pivot_layer}->{r.other_layer}':>9}"
                         f"{r.a_gap_pre:>12.4g}{r.a_gap_post:>12.4g}{r.a_gap_ratio:>8.3f}"
                         f"{r.b_cka_pre:>11.3f}{r.b_cka_post:>12.3f}")
    return "\n".join(lines) + "\n"


def cmd_align(args) -> int:
    scn_dir, ck_dir, _ = _layout(args.out)
    scn = _load_scenario(scn_dir)
    _check_seed(args, scn)
    cfg = scn.cfg
    types = [m.id for m in cfg.models]
    paths = {k: ck_dir / f"adapters_{k}.safetensors" for k in types}
    if all(p.exists() for p in paths.values()) and not args.force:
        print(f"checkpoints already present in {ck_dir}; skipping (use --force to recompute)")
        return EXIT_OK
    models = bench.build_models(cfg)
    fresh = bench.initial_adapters(cfg, models)
    aligned, reports = align_all(models, fresh, scn.public, cfg.align)
    hdr = bench.header(cfg)
    ck_dir.mkdir(parents=True, exist_ok=True)
    for k, ads in aligned.items():
        save_adapters(paths[k], ads, {**hdr, "model_type": k, "pivot": bench.pick_pivot(models)})
    rep = {"header": hdr, "layers": [dataclasses.asdict(r) | {"a_gap_ratio": r.a_gap_ratio} for r in reports]}
    _write(ck_dir / "alignment_report.json", json.dumps(rep, indent=2) + "\n")
    text = alignment_report_text(reports, hdr)
    _write(ck_dir / "alignment_report.txt", text)
    print(text, end="")
    return EXIT_OK


# -- run ---------------------------------------------------------------------------

# Keys a run may override without regenerating the scenario or re-aligning.
RUNTIME_SECTIONS = ("train",)
RUNTIME_FEDERATION_KEYS = ("local_steps", "eval_interval", "tau", "mu", "subsample_ratio")


def _runtime_config(base: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    if not overrides:
        return base
    for item in overrides:
        key = item.split("=", 1)[0].strip()
        section, _, rest = key.partition(".")
        if section in RUNTIME_SECTIONS or (section == "federation" and rest in RUNTIME_FEDERATION_KEYS):
            continue
        raise UsageError(f"--set {key}: changes the scenario or the checkpoints; regenerate instead")
    return config_from_dict(base.to_dict(), overrides)


def comparison_rows(summaries: dict[str, dict]) -> list[list[str]]:
    rows = [["method", "self_last", "self_auc", "others_last", "others_auc"]]
    for m, s in summaries.items():
        rows.append([m] + [f"{s[k]:.4f}" for k in rows[0][1:]])
    return rows


def write_comparison(res_dir: Path, summaries: dict[str, dict], hdr: dict, complete: bool) -> None:
    rows = comparison_rows(summaries)
    head = f"# config_hash={hdr['config_hash']} seed={hdr['seed']}" + ("" if complete else " status=incomplete")
    _write(res_dir / "comparison.csv", head + "\n" + "\n".join(",".join(r) for r in rows) + "\n")
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    table = [head, "            Self                 Others"]
    for r in rows:
        table.append("  ".join(cell.ljust(w) if c == 0 else cell.rjust(w) for c, (cell, w) in enumerate(zip(r, widths))))
    _write(res_dir / "comparison.txt", "\n".join(table) + "\n")


def write_method(res_dir: Path, result: bench.RunResult, hdr: dict) -> dict:
    m = result.method
    _write(res_dir / f"trace_{m}.csv", result.trace.to_csv(hdr))
    _write(res_dir / f"summary_{m}.json", result.trace.to_json(hdr))
    head = json.dumps({"header": hdr, "method": m})
    logs = [json.dumps(rec, sort_keys=True) for rec in result.client_logs()]
    _write(res_dir / f"clients_{m}.jsonl", "\n".join([head, *logs]) + "\n")
    rounds = [json.dumps(r.as_dict(), sort_keys=True) for r in result.rounds]
    _write(res_dir / f"rounds_{m}.jsonl", "\n".join([head, *rounds]) + "\n")
    return result.trace.summary()


def parse_methods(text: str | None) -> list[str]:
    if not text:
        return list(bench.METHODS)
    methods = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in methods if m not in bench.METHODS]
    if bad or not methods:
        raise UsageError(f"--methods: unknown {bad}; choose from {','.join(bench.METHODS)}")
    return list(dict.fromkeys(methods))


def cmd_run(args) -> int:
    methods = parse_methods(args.methods)
    scn_dir, ck_dir, res_dir = _layout(args.out)
    scn = _load_scenario(scn_dir)
    _check_seed(args, scn)
    cfg = _runtime_config(scn.cfg, args.set)

    checkpoints = None
    types = [m.id for m in cfg.models]
    needs_alignment = len(types) > 1 and any(m != "sft" for m in methods)
    if all((ck_dir / f"adapters_{k}.safetensors").exists() for k in types):
        checkpoints = {}
        for k in types:
            ads, meta = load_adapters(ck_dir / f"adapters_{k}.safetensors")
            if meta.get("config_hash") != scn.cfg.digest():
                raise UsageError(f"checkpoint for {k} was built from another scenario; rerun 'hetpfl align --force'")
            checkpoints[k] = ads
    elif needs_alignment:
        raise UsageError(f"aligned checkpoints missing in {ck_dir}; run 'hetpfl align' first")
    env = bench.prepare(scn, checkpoints)
    env = dataclasses.replace(env, scenario=dataclasses.replace(scn, cfg=cfg))
    hdr = bench.header(cfg)
    summaries: dict[str, dict] = {}
    try:
        for m in methods:
            log.info("running %s", m)
            summaries[m] = write_method(res_dir, bench.run(env, m), hdr)
    except KeyboardInterrupt:
        write_comparison(res_dir, summaries, hdr, complete=False)
        print(f"interrupted; completed methods: {', '.join(summaries) or 'none'}", file=sys.stderr)
        return EXIT_FAIL
    write_comparison(res_dir, summaries, hdr, complete=True)
    print((res_dir / "comparison.txt").read_text(), end="")
    return EXIT_OK


# -- check -------------------------------------------------------------------------


def cmd_check(args) -> int:
    suites = list(checks.SUITES) if args.suite == "all" else [args.suite]
    seed = 0 if args.seed is None else args.seed
    results = [r for s in suites for r in checks.run_suite(s, seed=seed)]
    for r in results:
        print(r.line())
    if args.out:
        _write(Path(args.out) / "check_report.jsonl", "\n".join(r.as_json() for r in results) + "\n")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} properties passed")
    return EXIT_FAIL if failed else EXIT_OK


# -- entry point -------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hetpfl", description="Heterogeneous personalized FL toy benchmark.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--out", required=out_required, help="workspace directory")
        sp.add_argument("--seed", type=int, default=None, help="master seed")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override (repeatable)")

    g = sub.add_parser("generate", help="build and save a scenario")
    common(g)
    g.add_argument("--config", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    a = sub.add_parser("align", help="align adapters across model types")
    common(a)
    a.add_argument("--force", action="store_true")
    a.set_defaults(func=cmd_align)

    r = sub.add_parser("run", help="train and evaluate methods")
    common(r)
    r.add_argument("--methods", default=None, help=f"comma list from {','.join(bench.METHODS)}")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("check", help="run a property suite")
    c.add_argument("suite", choices=[*checks.SUITES, "all"])
    c.add_argument("--seed", type=int, default=None)
    c.add_argument("--out", default=None)
    c.set_defaults(func=cmd_check)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "set", None) and args.command == "align":
        print("hetpfl: error: align takes its config from the scenario; --set is not accepted", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"hetpfl: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
