"""Command-line front end: thin wrappers over the library functions.

Subcommands::

    lcmuse gen-data     write a synthetic multi-coil dataset directory
    lcmuse train        fit the constrained prior on a dataset
    lcmuse reconstruct  solve every case of a dataset with the trained prior
    lcmuse verify       run the verification probes, write the report JSON
    lcmuse report       re-render the summary of a completed experiment
    lcmuse run          execute the full pipeline from a config file

Exit codes: 0 success, 2 configuration error (also used by argparse for bad
usage), 3 numerical failure, 4 verification failure (a probe record failed,
or a stored report does not pass its integrity check).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .energy import init_model, load_checkpoint
from .exceptions import ConfigError, NumericalError, ReportIntegrityError
from .experiment import (
    ExperimentConfig,
    SolverSection,
    StageFailure,
    TrainSection,
    _check_known_keys,
    reconstruct_dataset,
    report as render_report,
    run_experiment,
)
from .mri import generate_dataset, load_dataset
from .training import train, write_history_csv
from .verify import VerificationReport, VerifyConfig, run_verification

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_VERIFICATION = 4


def _cmd_gen_data(args) -> int:
    generate_dataset(
        args.out,
        n=args.n,
        size=args.size,
        accel=args.accel,
        mask_kind=args.mask,
        eta=args.eta,
        n_coils=args.coils,
        center_fraction=args.center_fraction,
        seed=args.seed,
    )
    print(f"wrote dataset of {args.n} images to {args.out}")
    return EXIT_OK


def _load_train_section(path: str | None) -> TrainSection:
    if path is None:
        return TrainSection()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        payload = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file is not valid JSON: {e}") from e
    if not isinstance(payload, dict):
        raise ConfigError("training config must be a JSON object")
    _check_known_keys(payload, TrainSection, "training config")
    return TrainSection(**payload)


def _cmd_train(args) -> int:
    section = _load_train_section(args.config)
    dataset = load_dataset(args.data)
    model = init_model(
        section.network_spec(), sigma_f=section.sigma_f, rng=np.random.default_rng(args.seed)
    )
    out = Path(args.out)
    model, history = train(model, dataset, section.train_config(args.seed), checkpoint_dir=out)
    write_history_csv(history, out / "history.csv")
    print(f"trained {len(history)} steps; final checkpoint at {out / 'final.lcmt'}")
    return EXIT_OK


def _cmd_reconstruct(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    eta = float(dataset.meta.get("eta", 0.0)) if args.eta is None else args.eta
    solver_cfg = SolverSection().solver_config(eta, args.m)
    sense_lam = 0.0 if eta == 0 else args.sense_lam
    reconstruct_dataset(model, dataset, solver_cfg, sense_lam, out_dir=args.out)
    print(f"reconstructed {len(dataset)} cases into {args.out}")
    return EXIT_OK


def _cmd_verify(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    eta = float(dataset.meta.get("eta", 0.0)) if args.eta is None else args.eta
    solver_cfg = SolverSection().solver_config(eta, args.m)
    cfg = VerifyConfig(delta=args.delta, m=args.m, seed=args.seed)
    vreport = run_verification(model, dataset, solver_cfg, cfg)
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(vreport.to_json())
    n_pass = sum(r.passed for r in vreport.records)
    print(f"verification: {n_pass}/{len(vreport.records)} records passed; report at {out}")
    return EXIT_OK if vreport.all_passed else EXIT_VERIFICATION


def _cmd_report(args) -> int:
    print(render_report(args.directory), end="")
    return EXIT_OK


def _cmd_run(args) -> int:
    cfg = ExperimentConfig.from_json_file(args.config)
    summary = run_experiment(cfg, reuse=args.reuse)
    print(summary, end="")
    report_path = Path(cfg.output_dir) / "verify" / "report.json"
    vreport = VerificationReport.from_json(report_path.read_text())
    return EXIT_OK if vreport.all_passed else EXIT_VERIFICATION


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lcmuse", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic multi-coil dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--accel", type=float, default=2.0)
    p.add_argument("--mask", choices=("1d", "2d"), default="1d")
    p.add_argument("--eta", type=float, default=0.01)
    p.add_argument("--coils", type=int, default=4)
    p.add_argument("--center-fraction", type=float, default=0.08)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="fit the constrained prior on a dataset")
    p.add_argument("--config", help="JSON with network and training settings (defaults if omitted)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("reconstruct", help="solve every case of a dataset with a trained prior")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eta", type=float, default=None, help="noise level the solver assumes; larger values weigh the prior more heavily (default: dataset metadata)")
    p.add_argument("--m", type=float, default=0.1)
    p.add_argument("--sense-lam", type=float, default=1e-2)
    p.set_defaults(func=_cmd_reconstruct)

    p = sub.add_parser("verify", help="run verification probes and write the report JSON")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--eta", type=float, default=None, help="noise level the solver assumes; larger values weigh the prior more heavily (default: dataset metadata)")
    p.add_argument("--m", type=float, default=0.1)
    p.add_argument("--delta", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("report", help="re-render the summary of a completed experiment directory")
    p.add_argument("directory")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("run", help="execute the full pipeline from an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--reuse", action="store_true", help="reuse existing artifacts when compatible")
    p.set_defaults(func=_cmd_run)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StageFailure as e:
        cause = e.__cause__
        print(f"error: {e}", file=sys.stderr)
        if isinstance(cause, ConfigError):
            return EXIT_CONFIG
        return EXIT_NUMERICAL
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ReportIntegrityError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VERIFICATION
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        if e.state:
            print(f"diagnostic state keys: {sorted(e.state)}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
