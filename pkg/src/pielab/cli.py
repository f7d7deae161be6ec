"""Command-line front end: ``pielab {check,convert,stability,sweep,spectrum}``.

Exit codes: 0 success (admissible / proven stable), 1 not proven, 2 invalid
input (parse error, unbound parameter, inadmissible model, bad bracket).
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import sys
import time
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path

import numpy as np

from . import lpi, oracle
from .conversion import InadmissibleError, compute_BT, convert, format_pie
from .pde_model import (
    PdeSpecError,
    PdeSystem,
    UnboundParameterError,
    UnknownParameterError,
    bind_params,
    load_pde,
    parse_pde,
)
from .polyalg import ExpressionError

EXIT_OK, EXIT_NOT_PROVEN, EXIT_INVALID = 0, 1, 2


class UsageError(Exception):
    """Invalid input; reported on stderr with exit code 2."""


# ---------------------------------------------------------------------------
# model loading


def bundled_models() -> list[str]:
    root = resources.files("pielab") / "models"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".pde"))


def resolve_model(path: str) -> PdeSystem:
    """Load a PDESPEC file; a bare bundled name such as ``heat_dirichlet`` also works."""
    p = Path(path)
    if p.is_file():
        return load_pde(p)
    name = p.name[:-4] if p.name.endswith(".pde") else p.name
    if str(p.parent) in ("", ".") and name in bundled_models():
        text = (resources.files("pielab") / "models" / f"{name}.pde").read_text(encoding="utf-8")
        return parse_pde(text, name=name)
    raise UsageError(f"{path}: no such file (bundled models: {', '.join(bundled_models())})")


def parse_assignments(items: list[str]) -> dict[str, Fraction]:
    out = {}
    for item in items:
        name, sep, value = item.partition("=")
        if not sep or not name.strip():
            raise UsageError(f"--set expects name=value, got {item!r}")
        try:
            out[name.strip()] = Fraction(value.strip())
        except (ValueError, ZeroDivisionError):
            raise UsageError(f"--set {name}: {value!r} is not a number") from None
    return out


def bound_model(args, extra: dict[str, Fraction] | None = None) -> PdeSystem:
    sys_ = resolve_model(args.model)
    values = parse_assignments(args.set)
    if extra:
        values.update(extra)
    return bind_params(sys_, values)


def _fmt_value(v: Fraction) -> str:
    return str(v.numerator) if v.denominator == 1 else f"{v.numerator}/{v.denominator}"


def _describe(sys_: PdeSystem, values: dict[str, Fraction]) -> str:
    if not values:
        return sys_.name or "model"
    sets = ", ".join(f"{k}={float(v):.10g}" for k, v in sorted(values.items()))
    return f"{sys_.name or 'model'} ({sets})"


def _fmt_matrix(M: np.ndarray) -> str:
    rows = []
    for row in M:
        rows.append("[" + ", ".join(_fmt_value(Fraction(x)) for x in row) + "]")
    return "[" + ", ".join(rows) + "]"


# ---------------------------------------------------------------------------
# commands


def cmd_check(args, out) -> int:
    sys_ = bound_model(args)
    rep = compute_BT(sys_)
    print(f"B_T = {_fmt_matrix(rep.BT)}", file=out)
    print(f"det(B_T) = {_fmt_value(rep.determinant)}", file=out)
    print(str(rep), file=out)
    return EXIT_OK if rep.admissible else EXIT_INVALID


def cmd_convert(args, out) -> int:
    sys_ = bound_model(args)
    pie = convert(sys_)
    text = format_pie(pie)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
        print(f"wrote {args.output}", file=out)
    else:
        out.write(text)
    return EXIT_OK


def cmd_spectrum(args, out) -> int:
    sys_ = bound_model(args)
    if args.method == "pie":
        mu = oracle.pie_eigenvalues(convert(sys_), args.N)
    else:
        mu = oracle.pde_eigenvalues(sys_, args.N)
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["quantity", "real", "imag"])
    w.writerow(["abscissa", f"{mu[0].real:.8g}", "0"])
    for k, m in enumerate(mu[:5]):
        w.writerow([f"eig{k + 1}", f"{m.real:.8g}", f"{m.imag:.8g}"])
    return EXIT_OK


@dataclass
class Evaluation:
    value: float
    proven: bool
    detail: str
    seconds: float

    @property
    def status(self) -> str:
        return "proven-stable" if self.proven else "not-proven"


def evaluate(sys_: PdeSystem, args, export: str | None = None):
    """Convert, assemble, solve and verify one fully bound model."""
    pie = convert(sys_)
    t0 = time.perf_counter()
    problem = lpi.assemble_lpi(pie, args.degree, args.alpha, args.delta, basis=args.basis)
    if export:
        lpi.write_sdpa(problem, export)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        result = lpi.solve(problem, args.backend, args.timeout)
    return pie, problem, result, time.perf_counter() - t0


def _not_proven_text(result) -> str:
    if isinstance(result, lpi.Infeasible):
        return "not proven (no certificate at this degree)"
    return f"not proven (backend: {result.message})"


def cmd_stability(args, out) -> int:
    sys_ = bound_model(args)
    values = parse_assignments(args.set)
    pie, problem, result, secs = evaluate(sys_, args, args.export_sdpa)
    print(f"model: {_describe(sys_, values)}", file=out)
    ctx = problem.context
    print(
        f"degree: {args.degree} (slack degree {ctx.param_H.degree}, basis {args.basis})"
        f"  alpha: {args.alpha:g}  delta: {args.delta:g}  backend: {args.backend}",
        file=out,
    )
    print(f"sdp: blocks {list(problem.block_sizes)}, {problem.n_constraints} equalities", file=out)
    if args.export_sdpa:
        print(f"exported: {args.export_sdpa}", file=out)
    code = EXIT_NOT_PROVEN
    if isinstance(result, lpi.StabilityCertificate):
        print("status: proven stable", file=out)
        print(result.report.summary(), file=out)
        code = EXIT_OK
    else:
        print(f"status: {_not_proven_text(result)}", file=out)
    if args.timings:
        print(f"time: {secs:.2f} s", file=out)
    return code


@dataclass
class SweepResult:
    param: str
    lo: float
    hi: float
    tol: float
    log: list[Evaluation] = field(default_factory=list)
    boundary: float | None = None


def _decimal_fraction(x: float) -> Fraction:
    return Fraction(repr(float(x)))


def sweep(sys_template: PdeSystem, args, out=None) -> SweepResult:
    """Bisection on proven stability between ``args.lo`` and ``args.hi``."""
    fixed = parse_assignments(args.set)
    if args.param in fixed:
        raise UsageError(f"{args.param} is swept; do not also --set it")
    if args.param not in sys_template.params:
        raise UsageError(f"model has no parameter {args.param!r}")
    if not args.lo < args.hi:
        raise UsageError("need lo < hi")
    if not args.tol > 0:
        raise UsageError("tol must be positive")
    res = SweepResult(args.param, args.lo, args.hi, args.tol)

    def run(v: float) -> Evaluation:
        values = dict(fixed)
        values[args.param] = _decimal_fraction(v)
        sys_ = bind_params(sys_template, values)
        _, _, result, secs = evaluate(sys_, args)
        ev = Evaluation(v, isinstance(result, lpi.StabilityCertificate), "", secs)
        if not ev.proven:
            ev.detail = _not_proven_text(result)
        res.log.append(ev)
        if out is not None and args.verbose:
            print(f"  {args.param}={v:.10g}: {ev.status}", file=out, flush=True)
        return ev

    lo_ev, hi_ev = run(args.lo), run(args.hi)
    if lo_ev.proven == hi_ev.proven:
        state = "proven stable" if lo_ev.proven else "not proven"
        raise UsageError(
            f"both ends are {state}; choose a bracket where the status changes"
        )
    good, bad = (args.lo, args.hi) if lo_ev.proven else (args.hi, args.lo)
    while abs(bad - good) > args.tol:
        mid = 0.5 * (good + bad)
        if run(mid).proven:
            good = mid
        else:
            bad = mid
    res.boundary = good
    return res


def write_log(res: SweepResult, fh, timings: bool) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["value", "status", "solve_seconds"])
    for ev in sorted(res.log, key=lambda e: e.value):
        w.writerow([f"{ev.value:.10g}", ev.status, f"{ev.seconds:.3f}" if timings else ""])


def oracle_crossing(sys_template: PdeSystem, args, widen: int = 4) -> tuple[float | None, bool]:
    """Where the oracle abscissa changes sign, and whether that is inside the bracket.

    When the abscissa has one sign over the whole bracket, the bracket is
    widened (each time by its own width, on both sides) up to ``widen`` times.
    """
    fixed = parse_assignments(args.set)

    def absc(v):
        values = dict(fixed)
        values[args.param] = _decimal_fraction(v)
        try:
            return oracle.spectral_abscissa(convert(bind_params(sys_template, values)), args.N)
        except InadmissibleError:
            return math.nan

    lo, hi = args.lo, args.hi
    f_lo, f_hi = absc(lo), absc(hi)
    inside = True
    for _ in range(widen):
        if (f_lo < 0) != (f_hi < 0):
            break
        inside = False
        width = hi - lo
        lo2, hi2 = lo - width, hi + width
        f_hi2 = absc(hi2)
        if (f_hi2 < 0) != (f_hi < 0):
            lo, f_lo, hi, f_hi = hi, f_hi, hi2, f_hi2
            break
        f_lo2 = absc(lo2)
        if (f_lo2 < 0) != (f_lo < 0):
            lo, f_lo, hi, f_hi = lo2, f_lo2, lo, f_lo
            break
        lo, f_lo, hi, f_hi = lo2, f_lo2, hi2, f_hi2
    if (f_lo < 0) == (f_hi < 0):
        return None, False
    while hi - lo > args.tol:
        mid = 0.5 * (lo + hi)
        if (absc(mid) < 0) == (f_lo < 0):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi), inside


def cmd_sweep(args, out) -> int:
    template = resolve_model(args.model)
    res = sweep(template, args, out)
    print(f"model: {template.name}", file=out)
    print(
        f"sweep {res.param} in [{res.lo:g}, {res.hi:g}], tol {res.tol:g}, degree {args.degree}, basis {args.basis}",
        file=out,
    )
    print(f"evaluations: {len(res.log)}", file=out)
    print(f"certified boundary: {res.param} = {res.boundary:.6f} (last proven-stable value)", file=out)
    if args.oracle:
        cross, inside = oracle_crossing(template, args)
        if cross is None:
            print(f"oracle crossing: none found near [{res.lo:g}, {res.hi:g}] at N={args.N}", file=out)
        else:
            where = "" if inside else ", outside the swept bracket"
            print(f"oracle crossing: {res.param} = {cross:.6f} (N={args.N}{where})", file=out)
            print(f"gap certified vs oracle: {abs(cross - res.boundary):.6f}", file=out)
    if args.output:
        with open(args.output, "w", encoding="utf-8", newline="") as fh:
            write_log(res, fh, args.timings)
        print(f"log: {args.output}", file=out)
    else:
        write_log(res, out, args.timings)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--set", action="append", default=[], metavar="NAME=VALUE",
                        help="bind a model parameter (repeatable)")
    common.add_argument("--degree", type=int, default=2, help="multiplier degree d (default 2)")
    common.add_argument("--alpha", type=float, default=1e-4, help="strictness of R >= alpha I")
    common.add_argument("--delta", type=float, default=1e-4, help="decay margin H >= delta T*T")
    common.add_argument("--basis", choices=lpi.BASIS_KINDS, default="tensor",
                        help="kernel monomials of the positive parameterization")
    common.add_argument("--backend", default="clarabel", choices=sorted(lpi.BACKENDS))
    common.add_argument("--export-sdpa", metavar="PATH", help="also write the SDP in SDPA sparse format")
    common.add_argument("--timeout", type=float, default=None, metavar="SECONDS")
    common.add_argument("-N", type=int, default=200, help="grid size for numerical oracles")
    common.add_argument("-o", "--output", metavar="PATH")
    common.add_argument("--timings", action="store_true", help="include wall-clock timings")

    ap = argparse.ArgumentParser(prog="pielab", description="Stability analysis of PDEs via partial integral equations.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("check", "check admissibility of the boundary conditions"),
        ("convert", "write the PIE form of a model"),
        ("stability", "search for a Lyapunov certificate"),
        ("spectrum", "numerical spectrum (oracle)"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("model", help="PDESPEC file or bundled model name")
        if name == "spectrum":
            p.add_argument("--method", choices=("pie", "pde"), default="pie",
                           help="discretize the PIE pencil or the PDE itself")
    p = sub.add_parser("sweep", parents=[common], help="bisect a parameter for the certified boundary")
    p.add_argument("model")
    p.add_argument("--param", required=True)
    p.add_argument("--lo", type=float, required=True)
    p.add_argument("--hi", type=float, required=True)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--oracle", action="store_true", help="also bisect the oracle abscissa sign")
    p.add_argument("-v", "--verbose", action="store_true", help="print each evaluation")
    return ap


COMMANDS = {
    "check": cmd_check,
    "convert": cmd_convert,
    "stability": cmd_stability,
    "spectrum": cmd_spectrum,
    "sweep": cmd_sweep,
}


def main(argv: list[str] | None = None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    args = build_parser().parse_args(argv)
    if getattr(args, "degree", 0) < 0:
        print("error: degree must be nonnegative", file=err)
        return EXIT_INVALID
    try:
        return COMMANDS[args.command](args, out)
    except UnknownParameterError as exc:
        print(f"error: {exc}", file=err)
    except (PdeSpecError, ExpressionError) as exc:
        print(f"{args.model}: parse error: {exc}", file=err)
    except (UnboundParameterError, UsageError, InadmissibleError, lpi.DegreeTooSmallError) as exc:
        print(f"error: {exc}", file=err)
    except oracle.OracleError as exc:
        print(f"error: {exc}", file=err)
    return EXIT_INVALID


def run(argv: list[str]) -> tuple[int, str, str]:
    """In-process invocation capturing output; handy for tests and scripts."""
    out, err = io.StringIO(), io.StringIO()
    code = main(argv, out, err)
    return code, out.getvalue(), err.getvalue()


if __name__ == "__main__":
    raise SystemExit(main())
