# cli.py
# Command-line entry point: python cli.py <subcommand> --config experiment.yaml ...
import argparse
import logging
import os
import sys

# ✅ Ensure local module imports work
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import settings
from errors import (
    CapViolationError,
    ConfigError,
    InvariantError,
    LabError,
    ProtocolViolationError,
)
from experiments.analyze import ANALYSES, cmd_analyze
from experiments.bounds_report import cmd_bounds
from experiments.config import load_config
from experiments.gen_data import cmd_gen_data
from experiments.report import cmd_report
from experiments.scale_study import cmd_scale_study
from experiments.switch_study import cmd_switch_study
from experiments.train import cmd_train
from utils.helpers import format_qps, run_status

logger = logging.getLogger("gbalab")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_INVARIANT = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gbalab", description="Token-controlled global-batch aggregation lab")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING (default: GBALAB_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="experiment YAML file")
        p.add_argument("--seed", type=int, default=None, help="run a single seed instead of run.seeds")
        p.add_argument("--out", default=None, help="output directory (overrides output.dir)")
        p.add_argument("--mode-override", default=None, help="inline YAML merged over the mode section")
        return p

    with_config("gen-data", "export the synthetic dataset and its ID histogram")
    train = with_config("train", "train and write trace, metrics, eval, checkpoint and summary")
    train.add_argument("--from", dest="from_path", default=None, help="checkpoint to continue from")
    with_config("switch-study", "branch a base checkpoint into target modes and compare")
    with_config("scale-study", "same global batch with different worker counts")
    with_config("bounds", "caps, floors, envelope check and switching-order sweep")

    analyze = sub.add_parser("analyze", help="analyze one or more traces")
    analyze.add_argument("traces", nargs="+", help="trace.jsonl files")
    analyze.add_argument("--analysis", choices=ANALYSES, required=True)
    analyze.add_argument("--out", default=None, help="directory for CSV output")

    report = sub.add_parser("report", help="comparison table over run directories")
    report.add_argument("runs", nargs="+", help="run directories (or trees of them)")
    report.add_argument("--out", default=None, help="CSV path for the table")
    return parser


def _load(args):
    return load_config(args.config, mode_override=args.mode_override, seed=args.seed, out=args.out)


def dispatch(args) -> int:
    command = args.command
    if command == "gen-data":
        cmd_gen_data(_load(args))
    elif command == "train":
        runs = cmd_train(_load(args), args.from_path)
        for run in runs:
            qps = run.trace.summary.get("global_qps")
            print(f"seed {run.seed}: {run.steps} steps, global step {run.params.global_step}, "
                  f"global QPS {format_qps(qps)}, {run_status(run.steps, run.trace.summary.get('dropped'))}")
    elif command == "switch-study":
        study = cmd_switch_study(_load(args))
        print(study.report.to_string(index=False))
    elif command == "scale-study":
        print(cmd_scale_study(_load(args)).to_string(index=False))
    elif command == "bounds":
        report = cmd_bounds(_load(args))
        print(report.table.to_string(index=False))
        if not report.passed:
            logger.error("❌ Bounds check failed")
            return EXIT_INVARIANT
    elif command == "analyze":
        result = cmd_analyze(args.traces, args.analysis, args.out)
        for name, frame in result.items():
            print(f"== {name}")
            print(frame.to_string())
    elif command == "report":
        print(cmd_report(args.runs, args.out).to_string(index=False))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    settings.configure_logging(args.log_level)
    try:
        return dispatch(args)
    except (ConfigError, CapViolationError) as exc:
        logger.error(f"❌ {exc}")
        return EXIT_CONFIG
    except (InvariantError, ProtocolViolationError) as exc:
        logger.error(f"❌ Invariant violated: {exc}")
        return EXIT_INVARIANT
    except LabError as exc:
        logger.error(f"❌ {exc}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
