"""``lab`` command line: instance generation, experiments, bounds and checks."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

from proxyadapt.bounds import BoundInputs, evaluate_all
from proxyadapt.errors import ProxyAdaptError
from proxyadapt.experiment import ExperimentConfig, emit_report, run_experiment
from proxyadapt.instances import InstanceConfig, generate_instance, load_bundle, save_bundle
from proxyadapt.oracle import build_level_sets, oracle_adapter, verify_reconstruction, write_adapter_json


def _read_json(path) -> dict:
    return json.loads(Path(path).read_text()) if path else {}


def cmd_generate(args) -> int:
    raw = _read_json(args.config)
    known = {f.name for f in fields(InstanceConfig)}
    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    cfg = InstanceConfig(**{k: v for k, v in raw.items() if k in known})
    bundle = generate_instance(cfg, seed=seed)
    save_bundle(bundle, args.out)
    print(json.dumps({"out": str(args.out), "seed": seed, "overall": bundle.certificates.overall}))
    return 0


def cmd_run(args) -> int:
    raw = _read_json(args.config)
    if args.seed is not None:
        raw["seeds"] = [args.seed]
    cfg = ExperimentConfig.from_dict(raw)
    out = args.out or cfg.output_dir
    if out is None:
        raise SystemExit("lab run: --out is required when the config has no output_dir")
    cfg.output_dir = str(out)
    results = run_experiment(cfg, threads=args.threads)
    report = emit_report(results, cfg, out)
    print(json.dumps({"out": str(out), "failed_cells": report["failed_cells"], "trend": report["trend"]}))
    return 0 if report["failed_cells"] == 0 else 1


def cmd_bounds(args) -> int:
    print(json.dumps(evaluate_all(BoundInputs.from_dict(_read_json(args.inputs))), indent=1))
    return 0


def cmd_check(args) -> int:
    rep = load_bundle(args.bundle).certificates
    print(json.dumps(rep.to_json(), indent=1))
    return 0 if rep.overall else 1


def cmd_adapter_oracle(args) -> int:
    bundle = load_bundle(args.bundle)
    ls = build_level_sets(bundle.fp)
    adapter = oracle_adapter(bundle.true_policy, bundle.fp, ls)
    err = verify_reconstruction(bundle.true_policy, bundle.fp, adapter, bundle.beta)
    out = Path(args.out) if args.out else Path(args.bundle) / "adapter.json"
    write_adapter_json(adapter, out)
    print(json.dumps({"out": str(out), "level_sets": len(ls), "max_d_py": err}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the seed(s) in the config")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="worker processes for experiment cells")
    p = argparse.ArgumentParser(prog="lab", description=__doc__, parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="generate an instance bundle")
    g.add_argument("--config", help="InstanceConfig JSON (defaults if omitted)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", parents=[common], help="run the learning-curve experiment")
    r.add_argument("--config", help="ExperimentConfig JSON (defaults if omitted)")
    r.add_argument("--out")
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("bounds", parents=[common], help="evaluate the sample-complexity bounds")
    b.add_argument("--inputs", required=True, help="BoundInputs JSON")
    b.set_defaults(func=cmd_bounds)

    c = sub.add_parser("check", parents=[common], help="re-run the condition certificates on a bundle")
    c.add_argument("--bundle", required=True)
    c.set_defaults(func=cmd_check)

    a = sub.add_parser("adapter-oracle", parents=[common], help="build the centroid adapter for a bundle")
    a.add_argument("--bundle", required=True)
    a.add_argument("--out")
    a.set_defaults(func=cmd_adapter_oracle)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.seed = getattr(args, "seed", None)
    args.threads = getattr(args, "threads", 1)
    try:
        return args.func(args)
    except (ProxyAdaptError, OSError, json.JSONDecodeError) as exc:
        print(f"lab: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
