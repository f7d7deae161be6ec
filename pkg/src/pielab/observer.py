"""Generator for the reaction-diffusion plant with a boundary-sensed observer.

The closed loop has states ``(x, xhat)`` on [0, 1], Dirichlet conditions on
both, and the measured slope mismatch written as ``∫ (∂²x - ∂²xhat) dθ`` so
that it becomes an integral term with kernel ``l_n(s)``. The gain

    l(s) = -sqrt(lam) I1(sqrt(lam (1 - s²))) / sqrt(1 - s²)

is not polynomial, so it is replaced by a least-squares polynomial fit.

Run ``python -m pielab.observer --lam 5 --degree 1 -o observer.pde``.
"""

from __future__ import annotations

import argparse
import math
import sys
from decimal import Decimal

import numpy as np

SERIES_TOL = 1e-12
FIT_POINTS = 200


def observer_gain(lam: float, s) -> np.ndarray:
    """Observer gain from the modified Bessel series.

    Substituting ``z = sqrt(lam (1 - s²))`` into ``I1(z) = Σ (z/2)^(2k+1) / (k! (k+1)!)``
    cancels the ``sqrt(1 - s²)`` so the series is evaluated without division.
    """
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    s = np.asarray(s, dtype=float)
    u = lam * (1.0 - s * s) / 4.0
    term = np.full_like(u, 1.0)
    total = term.copy()
    k = 0
    while True:
        k += 1
        term = term * u / (k * (k + 1))
        total = total + term
        if np.max(np.abs(term)) < SERIES_TOL * max(1.0, float(np.max(np.abs(total)))):
            break
    return -0.5 * lam * total


def fit_gain(lam: float, degree: int, points: int = FIT_POINTS) -> np.ndarray:
    """Least-squares polynomial coefficients (ascending powers of s) of the gain."""
    if degree < 0:
        raise ValueError("degree must be nonnegative")
    s = np.linspace(0.0, 1.0, points)
    V = np.vander(s, degree + 1, increasing=True)
    coef, *_ = np.linalg.lstsq(V, observer_gain(lam, s), rcond=None)
    return coef


def _decimal(x: float, digits: int = 12) -> str:
    if x == 0:
        return "0"
    d = Decimal(repr(float(x)))
    q = round(d, max(0, digits - d.adjusted() - 1))
    text = format(q.normalize(), "f")
    return text


def _poly_text(coef: np.ndarray, negate: bool = False) -> str:
    parts = []
    for k, c in enumerate(coef):
        c = -c if negate else c
        txt = _decimal(c)
        if txt in ("0", "-0"):
            continue
        mono = "" if k == 0 else ("*s" if k == 1 else f"*s^{k}")
        parts.append(f"({txt}){mono}")
    return " + ".join(parts) if parts else "0"


def observer_model(lam: float, degree: int) -> str:
    """PDESPEC text for the closed loop with gain ``l_degree``."""
    coef = fit_gain(lam, degree)
    lam_txt = _decimal(lam)
    lp, ln = _poly_text(coef), _poly_text(coef, negate=True)
    kern = f'[[0, 0, 0, 0, 0, 0], [0, 0, 0, 0, "{lp}", "{ln}"]]'
    return (
        f"# reaction-diffusion plant and observer, lam = {lam_txt}, gain fit degree {degree}\n"
        "# states: x, xhat; x_D = (x, xhat, dx, dxhat, ddx, ddxhat)\n"
        "[domain]\na = 0\nb = 1\n"
        "[states]\nn0 = 0\nn1 = 0\nn2 = 2\n"
        "[dynamics]\n"
        f"A0 = [[{lam_txt}, 0, 0, 0, 1, 0], [0, {lam_txt}, 0, 0, 0, 1]]\n"
        f"A1 = {kern}\n"
        f"A2 = {kern}\n"
        "[bc]\n"
        "# x_c at each end = (x, xhat, dx, dxhat); Dirichlet on both states\n"
        "B = [[1, 0, 0, 0, 0, 0, 0, 0],\n"
        "     [0, 1, 0, 0, 0, 0, 0, 0],\n"
        "     [0, 0, 0, 0, 1, 0, 0, 0],\n"
        "     [0, 0, 0, 0, 0, 1, 0, 0]]\n"
    )


def main(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(prog="python -m pielab.observer", description=__doc__.splitlines()[0])
    ap.add_argument("--lam", type=float, required=True)
    ap.add_argument("--degree", type=int, required=True)
    ap.add_argument("-o", "--output", help="write to this file instead of stdout")
    args = ap.parse_args(argv)
    if not math.isfinite(args.lam):
        ap.error("lam must be finite")
    text = observer_model(args.lam, args.degree)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
