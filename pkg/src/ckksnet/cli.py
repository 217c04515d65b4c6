"""Command-line front end: ``compile``, ``search`` and ``eval``.

Reports are JSON. Failures print one JSON object on stderr and exit with
1 (a check failed), 2 (bad input) or 3 (internal error).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Sequence

from .cost import CapacityError, Calibration
from .ddg import dump_ddg
from .lowering import LoweringError
from .network_ir import (
    BUNDLED,
    NetworkParseError,
    NetworkSpec,
    bundled_network,
    load_network,
)
from .pipeline import PipelineConfig, compile_graph, compile_network
from .search import CandidateError, SearchAborted, greedy_search
from .shadow import (
    EXACT,
    QUANTIZED,
    BindingError,
    MantissaOverflow,
    compare_outputs,
    eval_ddg,
    eval_reference,
    inputs_from_tensor,
    load_tensor,
    load_weights,
    random_input,
    random_weights,
)

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, kind: str, message: str, status: int = EXIT_INPUT, **extra: Any):
        super().__init__(message)
        self.kind = kind
        self.status = status
        self.extra = extra

    def to_dict(self) -> dict:
        return {"error": self.kind, "message": str(self), **self.extra}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise CliError("usage", message)


def _calib(text: str) -> Calibration:
    try:
        return Calibration.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _positive(text: str) -> int:
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("network", help="network JSON file, or a bundled name: " + ", ".join(BUNDLED))
    common.add_argument("--no-merge", action="store_true", help="skip coefficient merging")
    common.add_argument("--waterline", type=_positive, default=60, metavar="BITS", help="rescale prime size (default 60)")
    common.add_argument("--calib", type=_calib, default=Calibration(), metavar="K1,K2", help="cost constants (default 1,1)")
    common.add_argument("--seed", type=int, default=0, help="seed for generated weights and inputs")
    common.add_argument("--out", type=Path, help="write the JSON report here instead of stdout")

    parser = _Parser(prog="ckksnet", description="Compile, cost and search HE-friendly networks.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("compile", parents=[common], help="compile and write a cost report")
    p.add_argument("--ddg", type=Path, help="also dump the compiled graph (default: next to --out)")
    sub.add_parser("search", parents=[common], help="greedy module replacement search")
    p = sub.add_parser("eval", parents=[common], help="shadow-evaluate against the float reference")
    p.add_argument("--input", type=Path, help='input tensor JSON {"shape": [C,H,W], "data": [...]}')
    p.add_argument("--weights", type=Path, help="weights JSON keyed by layer position")
    p.add_argument("--tol", type=float, default=2.0**-10, help="relative tolerance (default 2^-10)")
    p.add_argument("--mode", choices=(QUANTIZED, EXACT), default=QUANTIZED)
    return parser


def _config(args) -> PipelineConfig:
    return PipelineConfig(
        merge_enabled=not args.no_merge,
        waterline_bits=args.waterline,
        calibration=args.calib,
        seed=args.seed,
        tol_rel=getattr(args, "tol", 2.0**-10),
    )


def _load(source: str) -> NetworkSpec:
    path = Path(source)
    if path.exists():
        try:
            return load_network(path)
        except OSError as exc:
            raise CliError("io", f"cannot read {source}: {exc.strerror}", path=source) from None
    if source in BUNDLED:
        return bundled_network(source)
    raise CliError("io", f"no such file or bundled network: {source}", path=source)


def _emit(doc: dict, out: Path | None) -> None:
    text = json.dumps(doc, indent=2) + "\n"
    if out is None:
        sys.stdout.write(text)
        return
    try:
        out.write_text(text)
    except OSError as exc:
        raise CliError("io", f"cannot write {out}: {exc.strerror}", path=str(out)) from None


def _say(args, line: str) -> None:
    # human-readable summary only when stdout is not carrying the report
    if args.out is not None:
        print(line)


def run_compile(args) -> int:
    spec = _load(args.network)
    config = _config(args)
    result = compile_network(spec, config)
    doc = {"network": spec.name, "lowered_layers": result.graph.lowered_layers, **result.report.to_dict(),
           "config": config.to_dict()}
    _emit(doc, args.out)
    ddg_path = args.ddg or (args.out.with_suffix(".ddg.json") if args.out is not None else None)
    if ddg_path is not None:
        try:
            dump_ddg(result.graph, ddg_path)
        except OSError as exc:
            raise CliError("io", f"cannot write {ddg_path}: {exc.strerror}", path=str(ddg_path)) from None
    p = result.report.params
    _say(args, f"{spec.name}: depth {result.report.depth}, r={p.rescale_budget_r}, "
               f"N={p.poly_degree_N}, Q={p.total_q_bits}, cost {result.report.cost_units:.6g}")
    return EXIT_OK


def run_search(args) -> int:
    spec = _load(args.network)
    config = _config(args)
    try:
        final, trace = greedy_search(spec, config=config)
    except SearchAborted as exc:
        cause = exc.cause.cause if isinstance(exc.cause, CandidateError) else exc.cause
        raise _classify(cause, partial=exc.trace.to_dict()) from exc
    doc = {"network": spec.name, **trace.to_dict(), "config": config.to_dict()}
    _emit(doc, args.out)
    _say(args, f"{spec.name}: replaced {sorted(trace.accepted) or 'nothing'}, "
               f"cost {trace.initial_cost:.6g} -> {trace.final_cost:.6g}")
    return EXIT_OK


def run_eval(args) -> int:
    spec = _load(args.network)
    config = _config(args)
    weights = load_weights(args.weights) if args.weights else random_weights(spec, config.seed, config.quant)
    tensor = load_tensor(args.input) if args.input else random_input(spec, config.seed + 1)
    ref = eval_reference(spec, tensor, weights)
    graph = compile_graph(spec, config, weights)
    got = eval_ddg(graph, inputs_from_tensor(graph, tensor), mode=args.mode)
    report = compare_outputs(got, ref, graph.output_slots, tol_rel=args.tol)
    doc = {"network": spec.name, "mode": args.mode, **report.to_dict(), "config": config.to_dict()}
    _emit(doc, args.out)
    verdict = "pass" if report.passed else "FAIL"
    _say(args, f"{spec.name}: max_rel_err {report.max_rel_err:.3e} (tol {args.tol:.3e}) {verdict}")
    return EXIT_OK if report.passed else EXIT_CHECK


def _classify(exc: BaseException, **extra) -> CliError:
    if isinstance(exc, CliError):
        return exc
    if isinstance(exc, NetworkParseError):
        return CliError("parse", str(exc), **extra)
    if isinstance(exc, LoweringError):
        return CliError("validation", str(exc), **extra)
    if isinstance(exc, CapacityError):
        return CliError("capacity", str(exc), **extra)
    if isinstance(exc, BindingError):
        return CliError("binding", str(exc), **extra)
    if isinstance(exc, MantissaOverflow):
        return CliError("overflow", str(exc), EXIT_CHECK, **extra)
    if isinstance(exc, (OSError, json.JSONDecodeError)):
        return CliError("io", str(exc), **extra)
    return CliError("internal", f"{type(exc).__name__}: {exc}", EXIT_INTERNAL, **extra)


COMMANDS = {"compile": run_compile, "search": run_search, "eval": run_eval}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except Exception as exc:  # every failure leaves as structured JSON
        err = _classify(exc)
        sys.stderr.write(json.dumps(err.to_dict()) + "\n")
        return err.status


if __name__ == "__main__":
    sys.exit(main())
