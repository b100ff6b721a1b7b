"""Command-line entry point: ``oseen-afem run --example bubble2d ...``."""

import argparse
import logging
import os
from pathlib import Path
import sys

from .adaptivity import GUARANTEED, AfemConfig, afem_run, normalize_mode
from .cases import CASES, case_library
from .errors import AfemError
from .ocp import OcpConfig
from . import reporting

log = logging.getLogger("oseen_afem")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oseen-afem",
                                     description="Adaptive FEM for box-constrained Oseen optimal control.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an adaptive benchmark")
    run.add_argument("--example", required=True, choices=CASES)
    run.add_argument("--refinements", type=int, default=12, help="number of adaptive refinements")
    run.add_argument("--estimator", choices=("computable", "residual"), default="computable")
    run.add_argument("--beta", type=float, help="inf-sup constant override")
    run.add_argument("--rho", type=float, help="pressure weight in the error norm")
    run.add_argument("--theta", type=float, help="control cost")
    run.add_argument("--tau-k-scale", type=float, help="element stabilization scale")
    run.add_argument("--out", default="out", help="output directory")
    run.add_argument("--svg", action="store_true", help="write a mesh snapshot per iteration")
    run.add_argument("--verbose", action="store_true")
    return parser


def _thread_limit():
    value = os.environ.get("AFEM_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise AfemError(f"AFEM_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise AfemError(f"AFEM_THREADS must be a positive integer, got {value!r}")
    return n


def run_command(args) -> int:
    if args.refinements < 0:
        raise AfemError("--refinements must be non-negative")
    case = case_library(args.example).with_overrides(
        beta=args.beta, rho=args.rho, theta=args.theta, tau_k_scale=args.tau_k_scale)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mode = normalize_mode(args.estimator)
    config = AfemConfig(max_iterations=args.refinements, estimator_mode=mode,
                        ocp=OcpConfig(verbose=args.verbose))
    history = afem_run(case, config=config, csv_path=out / "run.csv",
                       svg_dir=out / "svg" if args.svg else None)

    constants_text = reporting.format_constants(history.constants)
    (out / "constants.txt").write_text(constants_text)
    reporting.emit_indicator_csv(history.indicators, out / "indicators.csv")
    reporting.emit_svg(history.mesh, out / "final_mesh.svg", history.indicators.upsilon_K)
    if mode == GUARANTEED:
        text = "".join(f"iteration {r.iteration}\n{r.certification.report()}" for r in history)
        (out / "certification.txt").write_text(text)

    print(f"example {case.name}  estimator {args.estimator}  beta {case.spec.beta}")
    print(constants_text, end="")
    last = history[-1]
    print(f"iterations {len(history) - 1}  ndof {last.ndof}  upsilon {last.upsilon:.6e}"
          + ("" if last.err_total is None else f"  error {last.err_total:.6e}"
             f"  effectivity {last.effectivity:.4f}"))
    print(f"outputs written to {out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        limit = _thread_limit()
        if limit is None:
            return run_command(args)
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=limit):
            return run_command(args)
    except (AfemError, OSError) as exc:
        print(f"oseen-afem: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
