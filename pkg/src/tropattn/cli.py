"""
Command-line entry point: ``tropattn <experiment> [options]``.

Precedence for every setting is CLI flag, then ``--config`` file, then the
experiment default. Exit codes: 0 success, 2 a measured quantity violates its
bound, 1 usage or I/O error.
"""

from __future__ import annotations

import argparse
import inspect
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .experiments import DEFAULT_SEEDS, EXPERIMENTS, RUNNERS

EXIT_OK, EXIT_USAGE, EXIT_VIOLATION = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class ExperimentConfig:
    experiment: str
    params: dict = field(default_factory=dict)
    seed: Optional[int] = None
    output_dir: str = "out"
    format: str = "csv"
    threads: Optional[int] = None

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise UsageError(f"unknown experiment {self.experiment!r}")
        if self.format not in ("csv", "json"):
            raise UsageError("format must be csv or json")
        allowed = set(inspect.signature(RUNNERS[self.experiment]).parameters) - {
            "out_dir", "seed", "fmt", "threads"}
        unknown = sorted(set(self.params) - allowed)
        if unknown:
            raise UsageError(f"unknown params for {self.experiment}: {', '.join(unknown)}")
        if self.seed is None:
            self.seed = DEFAULT_SEEDS[self.experiment]

    @classmethod
    def from_file(cls, path) -> dict:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict) or "experiment" not in data:
            raise UsageError("config must be a JSON object with an 'experiment' field")
        return data

    def run(self):
        fn = RUNNERS[self.experiment]
        return fn(Path(self.output_dir), seed=int(self.seed), fmt=self.format, threads=self.threads, **self.params)


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _json_arg(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise argparse.ArgumentTypeError(f"invalid JSON: {exc}") from exc


# (flag, dest param, type, help) per subcommand
PARAM_FLAGS = {
    "field": [
        ("--taus", "taus", _floats, "comma-separated temperatures"),
        ("--grid", "grid", int, "grid resolution per axis"),
        ("--keys", "keys", _json_arg, "JSON list of 2-D keys"),
        ("--values", "values", _json_arg, "JSON list of RGB triples"),
    ],
    "minkowski_scaling": [
        ("--dim", "dim", int, "ambient dimension"),
        ("--heads", "h_list", _ints, "comma-separated head counts"),
        ("--tokens", "n_list", _ints, "comma-separated token counts"),
        ("--trials", "trials", int, "trials per (H, N) cell"),
    ],
    "region_scaling": [
        ("--depths", "l_list", _ints, "comma-separated depths"),
        ("--tokens", "n_list", _ints, "comma-separated token counts"),
        ("--samples", "n_samples", int, "Monte Carlo samples per network"),
        ("--replicates", "n_seeds", int, "random networks per (L, N)"),
        ("--heads", "n_heads", int, "heads per layer"),
        ("--d-ff", "d_ff", int, "FFN width"),
    ],
    "stability": [
        ("--scores", "scores", _json_arg, "JSON list of scores"),
        ("--scores-file", "scores_file", str, "JSON file holding a list of scores"),
        ("--tau", "tau", float, "temperature"),
        ("--trials", "trials", int, "extra random margin-positive vectors"),
    ],
    "lower_bound_verify": [
        ("--grid", "grid", _json_arg, "JSON list of [N, d, d_ff, L] tuples"),
        ("--samples", "n_samples", int, "Monte Carlo samples per tuple"),
    ],
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tropattn", description="Tropical attention experiments.")
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for exp in EXPERIMENTS:
        sp = subs.add_parser(exp.replace("_", "-"), help=f"run the {exp.replace('_', ' ')} experiment")
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, help=f"master seed (default {DEFAULT_SEEDS[exp]})")
        sp.add_argument("--out", help="output directory (default: out)")
        sp.add_argument("--format", choices=("csv", "json"), help="table format (default: csv)")
        sp.add_argument("--threads", type=int, help="worker threads (default: $THREADS or 1)")
        for flag, dest, typ, hlp in PARAM_FLAGS[exp]:
            metavar = flag.lstrip("-").upper().replace("-", "_")
            sp.add_argument(flag, dest=f"p_{dest}", type=typ, help=hlp, metavar=metavar)
    return parser


def config_from_args(args) -> ExperimentConfig:
    exp = args.command.replace("-", "_")
    data: dict = {}
    if args.config:
        data = ExperimentConfig.from_file(args.config)
        if data["experiment"] != exp:
            raise UsageError(f"config is for {data['experiment']!r}, not {exp!r}")
    params = dict(data.get("params", {}))
    for key, val in vars(args).items():
        if key.startswith("p_") and val is not None:
            params[key[2:]] = val
    if "scores_file" in params:
        path = params.pop("scores_file")
        try:
            with open(path) as fh:
                params["scores"] = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read scores from {path}: {exc}") from exc
    threads = args.threads if args.threads is not None else data.get("threads")
    if threads is None and os.environ.get("THREADS"):
        try:
            threads = int(os.environ["THREADS"])
        except ValueError as exc:
            raise UsageError("THREADS must be an integer") from exc
    return ExperimentConfig(
        experiment=exp,
        params=params,
        seed=args.seed if args.seed is not None else data.get("seed"),
        output_dir=args.out or data.get("output_dir", "out"),
        format=args.format or data.get("format", "csv"),
        threads=threads,
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        result = cfg.run()
    except UsageError as exc:
        print(f"tropattn: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, TypeError) as exc:
        print(f"tropattn: {exc}", file=sys.stderr)
        return EXIT_USAGE
    for path in result.files:
        print(path)
    for msg in result.messages:
        print(f"violation: {msg}", file=sys.stderr)
    return EXIT_OK if result.ok else EXIT_VIOLATION


if __name__ == "__main__":
    sys.exit(main())
