"""PDE to PIE conversion.

Every state is replaced by its highest well-defined derivative
``x_f = D x = col(x0, ∂x1, ∂²x2)``.  Repeated use of the fundamental theorem
of calculus gives::

    x_c(s) = T(s-a) x_c(a) + ∫_a^s Q(s-th) x_f(th) dth

and the boundary conditions pin ``x_c(a) = ∫_a^b B_Q(th) x_f(th) dth`` as long
as the matrix ``B_T`` is invertible.  Substituting back yields operators
``T`` with ``x = T x_f`` and ``A`` with ``ẋ = A x_f``, i.e. the PIE
``T ẋ_f = A x_f``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .pde_model import PdeSystem, StatePartition, continuous_part, state_derivatives
from .pi_ops import PiOperator, apply_poly, compose, format_operator, inner, parse_operator
from .polyalg import (
    DimensionError,
    PolyMat1,
    PolyMat2,
    block1,
    block2,
    integrate,
    subst_shift,
    to_fraction,
)


class InadmissibleError(ValueError):
    """Boundary conditions do not determine the state from its highest derivatives."""


class NotInDomainError(ValueError):
    """A candidate state violates the boundary conditions."""


# ---------------------------------------------------------------------------
# matrices depending only on the partition


@dataclass(frozen=True)
class CoreMatrices:
    T: PolyMat1  # n_S x n_S, function of the displacement from a
    Q: PolyMat1  # n_S x n_x, FTC kernel in the displacement s - th
    U1: np.ndarray  # (n_x + n_S) x n_x, places x_f inside x_D
    U2: np.ndarray  # (n_x + n_S) x n_S, places x_c inside x_D


def _eye(n: int) -> np.ndarray:
    out = np.empty((n, n), dtype=object)
    out.fill(Fraction(0))
    for i in range(n):
        out[i, i] = Fraction(1)
    return out


def _zeros(r: int, c: int) -> np.ndarray:
    out = np.empty((r, c), dtype=object)
    out.fill(Fraction(0))
    return out


def core_matrices(n: StatePartition) -> CoreMatrices:
    n0, n1, n2, nx, nS = n.n0, n.n1, n.n2, n.nx, n.nS
    # T(x) = diag(I_n1, [[I, x I], [0, I]])
    Tc = np.empty((nS, nS, 2), dtype=object)
    Tc.fill(Fraction(0))
    Tc[:, :, 0] = _eye(nS)
    for k in range(n2):
        Tc[n1 + k, n1 + n2 + k, 1] = Fraction(1)
    # Q(x): x1 <- ∂x1, x2 <- x * ∂²x2, ∂x2 <- ∂²x2
    Qc = np.empty((nS, nx, 2), dtype=object)
    Qc.fill(Fraction(0))
    for k in range(n1):
        Qc[k, n0 + k, 0] = Fraction(1)
    for k in range(n2):
        Qc[n1 + k, n0 + n1 + k, 1] = Fraction(1)
        Qc[n1 + n2 + k, n0 + n1 + k, 0] = Fraction(1)
    slots = n.slots()
    U1 = _zeros(n.nD, nx)
    for src, dst in ((slice(0, n0), slots["x0"]), (slice(n0, n0 + n1), slots["dx1"]), (slice(n0 + n1, nx), slots["ddx2"])):
        U1[dst, src] = _eye(src.stop - src.start)
    U2 = _zeros(n.nD, nS)
    for src, dst in ((slice(0, n1), slots["x1"]), (slice(n1, n1 + n2), slots["x2"]), (slice(n1 + n2, nS), slots["dx2"])):
        U2[dst, src] = _eye(src.stop - src.start)
    return CoreMatrices(PolyMat1(Tc, exact=True), PolyMat1(Qc, exact=True), U1, U2)


def _const1(m: np.ndarray) -> PolyMat1:
    return PolyMat1.constant(m) if m.size else PolyMat1.zeros(*m.shape)


# ---------------------------------------------------------------------------
# admissibility


@dataclass(frozen=True)
class AdmissibilityReport:
    BT: np.ndarray
    determinant: Fraction
    condition_estimate: float
    admissible: bool

    def __str__(self) -> str:
        verdict = "admissible" if self.admissible else "inadmissible"
        det = self.determinant
        det_s = str(det.numerator) if det.denominator == 1 else f"{det.numerator}/{det.denominator}"
        return f"{verdict}, det(B_T)={det_s}"


def exact_det(M: np.ndarray) -> Fraction:
    """Determinant by fraction-exact Gaussian elimination."""
    A = [[to_fraction(v) for v in row] for row in M]
    n = len(A)
    det = Fraction(1)
    for c in range(n):
        piv = next((r for r in range(c, n) if A[r][c] != 0), None)
        if piv is None:
            return Fraction(0)
        if piv != c:
            A[c], A[piv] = A[piv], A[c]
            det = -det
        det *= A[c][c]
        for r in range(c + 1, n):
            f = A[r][c] / A[c][c]
            if f:
                A[r] = [x - f * y for x, y in zip(A[r], A[c])]
    return det


def exact_inverse(M: np.ndarray) -> np.ndarray:
    n = M.shape[0]
    A = [[to_fraction(v) for v in row] + [Fraction(int(i == j)) for j in range(n)] for i, row in enumerate(M)]
    for c in range(n):
        piv = next((r for r in range(c, n) if A[r][c] != 0), None)
        if piv is None:
            raise ZeroDivisionError("singular matrix")
        A[c], A[piv] = A[piv], A[c]
        p = A[c][c]
        A[c] = [x / p for x in A[c]]
        for r in range(n):
            if r != c and A[r][c] != 0:
                f = A[r][c]
                A[r] = [x - f * y for x, y in zip(A[r], A[c])]
    out = np.empty((n, n), dtype=object)
    for i in range(n):
        for j in range(n):
            out[i, j] = A[i][n + j]
    return out


def compute_BT(sys: PdeSystem) -> AdmissibilityReport:
    n = sys.partition
    if sys.n_bc != n.nS:
        raise InadmissibleError(
            f"{sys.n_bc} boundary conditions for n_S = {n.nS} boundary-determined components"
        )
    cm = core_matrices(n)
    if n.nS == 0:
        return AdmissibilityReport(_zeros(0, 0), Fraction(1), 1.0, True)
    a, b = sys.a, sys.b
    stacked = np.concatenate([cm.T(Fraction(0)), cm.T(b - a)], axis=0)
    Tsa = subst_shift(cm.T, "s-a", a, b).only_s()
    integrand = sys.BI @ _const1(cm.U2) @ Tsa
    BT = sys.B.dot(stacked) - integrand.integrate(a, b)
    det = exact_det(BT)
    if det != 0:
        cond = float(np.linalg.cond(BT.astype(float)))
    else:
        cond = float("inf")
    if det != 0 and cond > 1e8:
        warnings.warn(f"B_T is badly conditioned (cond ~ {cond:.3g})", stacklevel=2)
    return AdmissibilityReport(BT, det, cond, det != 0)


def _require_admissible(sys: PdeSystem) -> AdmissibilityReport:
    rep = compute_BT(sys)
    if not rep.admissible:
        raise InadmissibleError("B_T is singular: boundary conditions are not admissible")
    return rep


def compute_BQ(sys: PdeSystem) -> PolyMat1:
    """``B_Q(s)`` with ``x_c(a) = ∫ B_Q(th) x_f(th) dth`` on the domain."""
    n = sys.partition
    rep = _require_admissible(sys)
    if n.nS == 0:
        return PolyMat1.zeros(0, n.nx)
    a, b = sys.a, sys.b
    cm = core_matrices(n)
    U1, U2 = _const1(cm.U1), _const1(cm.U2)
    # -B [0; Q(b - s)]
    Qb = subst_shift(cm.Q, "b-s", a, b).only_s()
    B_hi = _const1(sys.B[:, n.nS :])
    term_b = B_hi @ Qb
    # ∫_s^b BI(th) U2 Q(th - s) dth, integrand as a function of (s, th)
    Qts = subst_shift(cm.Q, "th-s", a, b)
    integrand = (sys.BI @ U2).as_th() @ Qts
    term_int = integrate(integrand, "th", "s", b)
    rhs = sys.BI @ U1 - term_b + term_int
    return _const1(exact_inverse(rep.BT)) @ rhs


# ---------------------------------------------------------------------------
# the PIE operators


@dataclass(frozen=True, eq=False)
class PieSystem:
    T: PiOperator
    A: PiOperator
    partition: StatePartition
    source: PdeSystem | None = None

    def __post_init__(self):
        nx = self.partition.nx
        if self.T.shape != (nx, nx) or self.A.shape != (nx, nx):
            raise DimensionError("T and A must be n_x by n_x")
        if (self.T.a, self.T.b) != (self.A.a, self.A.b):
            raise DimensionError("T and A live on different domains")

    @property
    def a(self) -> Fraction:
        return self.T.a

    @property
    def b(self) -> Fraction:
        return self.T.b


def _state_selector(n: StatePartition) -> np.ndarray:
    """Rows of x_c that are states (drops the ∂x2 rows)."""
    S = _zeros(n.n1 + n.n2, n.nS)
    for k in range(n.n1 + n.n2):
        S[k, k] = Fraction(1)
    return S


def fundamental_kernels(sys: PdeSystem):
    """``(BQ, Tsa, Qst)``: pieces shared by ``build_T`` and ``build_A``."""
    n = sys.partition
    cm = core_matrices(n)
    BQ = compute_BQ(sys)
    Tsa = subst_shift(cm.T, "s-a", sys.a, sys.b)  # depends on s only
    Qst = subst_shift(cm.Q, "s-th", sys.a, sys.b)
    return cm, BQ, Tsa, Qst


def build_T(sys: PdeSystem) -> PiOperator:
    """Operator reconstructing the PDE state from ``x_f``."""
    n = sys.partition
    cm, BQ, Tsa, Qst = fundamental_kernels(sys)
    nx, n0 = n.nx, n.n0
    G0 = np.diag([Fraction(1)] * n0 + [Fraction(0)] * (nx - n0)).astype(object)
    if n.nS == 0:
        return PiOperator(PolyMat1.constant(G0), PolyMat2.zeros(nx, nx), PolyMat2.zeros(nx, nx), sys.a, sys.b)
    S = _const1(_state_selector(n))
    lower = S @ (Tsa @ BQ.as_th())
    G2 = block2([[PolyMat2.zeros(n0, nx)], [lower]]) if n0 else lower
    qpart = S @ Qst
    G1 = (block2([[PolyMat2.zeros(n0, nx)], [qpart]]) if n0 else qpart) + G2
    return PiOperator(PolyMat1.constant(G0), G1, G2, sys.a, sys.b)


def derivative_operator(sys: PdeSystem) -> PiOperator:
    """PI operator mapping ``x_f`` to ``x_D`` on the domain."""
    n = sys.partition
    cm, BQ, Tsa, Qst = fundamental_kernels(sys)
    U1, U2 = _const1(cm.U1), _const1(cm.U2)
    if n.nS == 0:
        return PiOperator.multiplier(U1, sys.a, sys.b)
    RD2 = U2 @ (Tsa @ BQ.as_th())
    RD1 = RD2 + U2 @ Qst
    return PiOperator(U1, RD1, RD2, sys.a, sys.b)


def build_A(sys: PdeSystem) -> PiOperator:
    """Operator giving ``ẋ`` from ``x_f``: the PDE right side composed with ``x_f -> x_D``."""
    dyn = PiOperator(sys.A0, sys.A1, sys.A2, sys.a, sys.b)
    return compose(dyn, derivative_operator(sys))


def build_A_appendix(sys: PdeSystem) -> PiOperator:
    """Same operator as :func:`build_A`, written out term by term.

    Kept as an independent route for testing the composition code.
    """
    from .polyalg import int_product

    RD = derivative_operator(sys)
    U1, RD1, RD2 = RD.R0, RD.R1, RD.R2
    A0, A1, A2 = sys.A0, sys.A1, sys.A2
    a, b = sys.a, sys.b
    hat0 = A0 @ U1
    hat1 = (
        A0.as_s() @ RD1
        + A1 @ U1
        + int_product(A1, RD2, a, "th")
        + int_product(A1, RD1, "th", "s")
        + int_product(A2, RD1, "s", b)
    )
    hat2 = (
        A0.as_s() @ RD2
        + A2 @ U1
        + int_product(A1, RD2, a, "s")
        + int_product(A2, RD2, "s", "th")
        + int_product(A2, RD1, "th", b)
    )
    return PiOperator(hat0, hat1, hat2, a, b)


def convert(sys: PdeSystem) -> PieSystem:
    _require_admissible(sys)
    return PieSystem(build_T(sys), build_A(sys), sys.partition, sys)


# ---------------------------------------------------------------------------
# D and the round-trip identities


def apply_D(n: StatePartition, x: PolyMat1) -> PolyMat1:
    """``col(x0, ∂x1, ∂²x2)``."""
    if x.shape[0] != n.nx:
        raise DimensionError(f"state must have {n.nx} rows")
    x0 = x[0 : n.n0, :]
    x1 = x[n.n0 : n.n0 + n.n1, :]
    x2 = x[n.n0 + n.n1 : n.nx, :]
    return block1([[x0], [x1.derivative()], [x2.derivative(2)]])


def l2_norm_sq(v: PolyMat1, a, b) -> Fraction:
    return inner(v, v, a, b)


def round_trip_residual(sys: PdeSystem, pie: PieSystem, x: PolyMat1, xhat: PolyMat1 | None = None) -> Fraction:
    """Squared L2 norms of ``T D x - x`` plus (optionally) ``D T xhat - xhat``.

    Exact; zero when both identities hold.
    """
    from .pde_model import boundary_defect

    if any(v != 0 for v in boundary_defect(sys, x).reshape(-1)):
        raise NotInDomainError("state does not satisfy the boundary conditions")
    n = sys.partition
    fwd = apply_poly(pie.T, apply_D(n, x)) - x
    total = l2_norm_sq(fwd, sys.a, sys.b)
    if xhat is not None:
        back = apply_D(n, apply_poly(pie.T, xhat)) - xhat
        total += l2_norm_sq(back, sys.a, sys.b)
    return total


def x_inner(n: StatePartition, x: PolyMat1, y: PolyMat1, a, b) -> Fraction:
    """``<x, y>_X = <D x, D y>_L2``."""
    return inner(apply_D(n, x), apply_D(n, y), a, b)


def h_norm(n: StatePartition, x: PolyMat1, a, b) -> float:
    """Sobolev norm: sum over states of sum of L2 norms of their derivatives."""
    import math

    total = 0.0
    for i in range(n.nx):
        order = 0 if i < n.n0 else (1 if i < n.n0 + n.n1 else 2)
        xi = x[i : i + 1, :]
        for j in range(order + 1):
            total += math.sqrt(float(l2_norm_sq(xi.derivative(j) if j else xi, a, b)))
    return total


def x_norm(n: StatePartition, x: PolyMat1, a, b) -> float:
    import math

    return math.sqrt(float(x_inner(n, x, x, a, b)))


def project_to_domain(sys: PdeSystem, x: PolyMat1) -> PolyMat1:
    """Nearest-in-construction member of the domain: ``T D x``."""
    pie_T = build_T(sys)
    return apply_poly(pie_T, apply_D(sys.partition, x))


# ---------------------------------------------------------------------------
# serialization of a PIE


def format_pie(pie: PieSystem) -> str:
    n = pie.partition
    head = f"# pie v1\n# states n0={n.n0} n1={n.n1} n2={n.n2}\n"
    return head + "[T]\n" + format_operator(pie.T) + "[A]\n" + format_operator(pie.A)


def parse_pie(text: str) -> tuple[PiOperator, PiOperator]:
    if "[T]" not in text or "[A]" not in text:
        raise ValueError("missing [T] or [A] block")
    t_part = text.split("[T]", 1)[1].split("[A]", 1)[0]
    a_part = text.split("[A]", 1)[1]
    return parse_operator(t_part), parse_operator(a_part)
