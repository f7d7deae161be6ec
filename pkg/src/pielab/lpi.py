"""Lyapunov operator inequality for a PIE, posed and checked as an SDP.

A PIE ``T ẋ = A x`` is exponentially stable if some ``R ⪰ αI`` satisfies

    -(T* R A + A* R T) = H,    H ⪰ δ T* T.

Both operators are parameterized as positive PI operators
``Zop* M Zop + ridge`` with ``M ⪰ 0``, which turns the operator identity into
linear equalities on the entries of ``M_R`` and ``M_H``: one equality per
monomial coefficient per kernel entry. Assembly runs in floating point; every
certificate a solver returns is re-checked in exact rational arithmetic
before it is reported.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from fractions import Fraction
from math import comb
from typing import Sequence

import numpy as np

from .conversion import PieSystem
from .pi_ops import PiOperator, adjoint, compose, compose_unsummed
from .polyalg import (
    DimensionError,
    PolyMat1,
    PolyMat2,
    _add_arrays,
    _mk1,
    _mk2,
    _zeros,
    fast_rational_array,
    to_fraction,
)

BASIS_KINDS = ("theta", "tensor")
DEFAULT_BASIS = "tensor"


class DegreeTooSmallError(ValueError):
    """The Lyapunov derivative has monomials the slack operator cannot reach."""


class BackendUnavailableError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# positive PI parameterization


def _shifted_powers(k: int, a: Fraction, b: Fraction) -> list[Fraction]:
    """Ascending coefficients in ``s`` of ``((s - a) / (b - a))^k``."""
    w = b - a
    return [Fraction(comb(k, j)) * (-a) ** (k - j) / w**k for j in range(k + 1)]


@dataclass(frozen=True)
class PositivePiParam:
    """Shape of ``Zop* M Zop + ridge·I`` acting on ``L2[a, b]^nx``.

    ``Zop`` stacks three blocks: a multiplier by the monomials
    ``1, σ, ..., σ^d`` in ``σ = (s - a)/(b - a)``, then lower and upper
    integral blocks whose kernels are the monomials of ``kernel_exponents``.
    With ``basis="theta"`` those are ``σ(th)^j``; with ``basis="tensor"`` they
    are ``σ(s)^i σ(th)^j`` for ``i, j <= d``.
    """

    degree: int
    nx: int = 1
    a: Fraction = Fraction(0)
    b: Fraction = Fraction(1)
    ridge: Fraction = Fraction(0)
    basis: str = DEFAULT_BASIS

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("degree must be nonnegative")
        if self.nx < 1:
            raise ValueError("nx must be positive")
        if self.basis not in BASIS_KINDS:
            raise ValueError(f"basis must be one of {BASIS_KINDS}")
        object.__setattr__(self, "a", to_fraction(self.a))
        object.__setattr__(self, "b", to_fraction(self.b))
        object.__setattr__(self, "ridge", to_fraction(self.ridge))
        if self.ridge < 0:
            raise ValueError("ridge must be nonnegative")

    @property
    def kernel_exponents(self) -> list[tuple[int, int]]:
        d = self.degree
        if self.basis == "theta":
            return [(0, j) for j in range(d + 1)]
        return [(i, j) for i in range(d + 1) for j in range(d + 1)]

    @property
    def block_size(self) -> int:
        """Rows of the multiplier block; each block holds this many per monomial set."""
        return (self.degree + 1) * self.nx

    @property
    def kernel_block_size(self) -> int:
        return len(self.kernel_exponents) * self.nx

    @property
    def size(self) -> int:
        return self.block_size + 2 * self.kernel_block_size

    def zop(self, exact: bool = True) -> PiOperator:
        d, nx, a, b = self.degree, self.nx, self.a, self.b
        m0, mk = self.block_size, self.kernel_block_size
        m = self.size
        powers = [_shifted_powers(k, a, b) for k in range(d + 1)]
        R0 = _zeros((m, nx, d + 1), True)
        for k in range(d + 1):
            for c in range(nx):
                R0[k * nx + c, c, : k + 1] = powers[k]
        ker = _zeros((mk, nx, d + 1, d + 1), True)
        for r, (i, j) in enumerate(self.kernel_exponents):
            coef = np.outer(np.array(powers[i] + [Fraction(0)] * (d - i), dtype=object),
                            np.array(powers[j] + [Fraction(0)] * (d - j), dtype=object))
            for c in range(nx):
                ker[r * nx + c, c] = coef
        R1 = _zeros((m, nx, d + 1, d + 1), True)
        R2 = _zeros((m, nx, d + 1, d + 1), True)
        R1[m0 : m0 + mk] = ker
        R2[m0 + mk :] = ker
        Z = PiOperator(PolyMat1(R0, exact=True), PolyMat2(R1, exact=True), PolyMat2(R2, exact=True), a, b)
        return Z if exact else Z.to_float()


def _fast_exact(P: PiOperator) -> PiOperator:
    """Exact copy of ``P`` whose coefficients use the fastest rational type."""
    P = P.to_exact()
    return PiOperator(
        _mk1(fast_rational_array(P.R0.coeffs)),
        _mk2(fast_rational_array(P.R1.coeffs)),
        _mk2(fast_rational_array(P.R2.coeffs)),
        P.a,
        P.b,
    )


def _exact_matrix(M) -> np.ndarray:
    arr = np.asarray(M)
    out = np.empty(arr.shape, dtype=object)
    for idx in np.ndindex(arr.shape):
        out[idx] = to_fraction(arr[idx])
    return out


def realize_positive(param: PositivePiParam, M, exact: bool | None = None) -> PiOperator:
    """The operator ``Zop* M Zop + ridge·I``.

    Exact when ``M`` holds integers or Fractions (or ``exact=True``, which
    converts floats to their exact binary values).
    """
    M = np.asarray(M)
    if M.shape != (param.size, param.size):
        raise DimensionError(f"M must be {param.size}x{param.size} for this parameterization, got {M.shape}")
    if exact is None:
        exact = M.dtype == object or np.issubdtype(M.dtype, np.integer)
    if exact:
        Mx = _exact_matrix(M)
        if np.any(Mx != Mx.T):
            raise ValueError("M must be symmetric")
        Z = _fast_exact(param.zop(exact=True))
        Mop = PiOperator.multiplier(_mk1(fast_rational_array(Mx[:, :, None])), param.a, param.b)
        ridge = PiOperator.identity(param.nx, param.a, param.b).scale(param.ridge)
    else:
        Mf = np.asarray(M, dtype=float)
        if not np.allclose(Mf, Mf.T, rtol=0, atol=1e-12 * max(1.0, np.abs(Mf).max())):
            raise ValueError("M must be symmetric")
        Z = param.zop(exact=False)
        Mop = PiOperator.multiplier(PolyMat1(Mf[:, :, None], exact=False), param.a, param.b)
        ridge = PiOperator.identity(param.nx, param.a, param.b, exact=False).scale(float(param.ridge))
    return compose(adjoint(Z), compose(Mop, Z)) + ridge


# ---------------------------------------------------------------------------
# the SDP in SDPA layout


@dataclass(eq=False)
class SdpProblem:
    """Feasibility SDP: find ``Y = diag(Y_1, ..., Y_k) ⪰ 0`` with ``tr(F_c Y) = rhs_c``.

    Constraint matrices are stored sparsely as parallel arrays of
    ``(constraint, block, i, j, value)`` with 0-based indices and ``i <= j``;
    an off-diagonal value stands for both symmetric positions, as in the
    SDPA sparse format. ``context`` links back to the assembly and is neither
    exported nor compared.
    """

    block_sizes: tuple[int, ...]
    rhs: np.ndarray
    con: np.ndarray
    blk: np.ndarray
    row: np.ndarray
    col: np.ndarray
    val: np.ndarray
    block_names: tuple[str, ...] = ()
    context: "LpiContext | None" = field(default=None, repr=False)

    def __post_init__(self):
        self.rhs = np.asarray(self.rhs, dtype=np.float64)
        self.con = np.asarray(self.con, dtype=np.int64)
        self.blk = np.asarray(self.blk, dtype=np.int64)
        self.row = np.asarray(self.row, dtype=np.int64)
        self.col = np.asarray(self.col, dtype=np.int64)
        self.val = np.asarray(self.val, dtype=np.float64)
        n = len(self.con)
        if not (len(self.blk) == len(self.row) == len(self.col) == len(self.val) == n):
            raise ValueError("sparse arrays have different lengths")
        if n:
            if self.con.min() < 0 or self.con.max() >= len(self.rhs):
                raise ValueError("entry references an undeclared constraint")
            if self.blk.min() < 0 or self.blk.max() >= len(self.block_sizes):
                raise ValueError("entry references an undeclared block")
            sizes = np.asarray(self.block_sizes)[self.blk]
            if np.any(self.row < 0) or np.any(self.col >= sizes) or np.any(self.row > self.col):
                raise ValueError("entry indices outside the upper triangle of their block")
        if self.block_names and len(self.block_names) != len(self.block_sizes):
            raise ValueError("one name per block")

    @property
    def n_constraints(self) -> int:
        return len(self.rhs)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SdpProblem):
            return NotImplemented
        return (
            tuple(self.block_sizes) == tuple(other.block_sizes)
            and tuple(self.block_names) == tuple(other.block_names)
            and np.array_equal(self.rhs, other.rhs)
            and all(
                np.array_equal(getattr(self, f), getattr(other, f))
                for f in ("con", "blk", "row", "col", "val")
            )
        )

    def dense_constraint(self, c: int, block: int) -> np.ndarray:
        """Symmetric ``F_c`` restricted to one block."""
        n = self.block_sizes[block]
        F = np.zeros((n, n))
        sel = (self.con == c) & (self.blk == block)
        F[self.row[sel], self.col[sel]] = self.val[sel]
        F[self.col[sel], self.row[sel]] = self.val[sel]
        return F

    def residuals(self, Ys: Sequence[np.ndarray]) -> np.ndarray:
        """``tr(F_c Y) - rhs_c`` for every constraint."""
        out = -self.rhs.copy()
        for b, Y in enumerate(Ys):
            sel = self.blk == b
            r, c, v = self.row[sel], self.col[sel], self.val[sel]
            contrib = np.where(r == c, 1.0, 2.0) * v * np.asarray(Y)[r, c]
            np.add.at(out, self.con[sel], contrib)
        return out


def write_sdpa(problem: SdpProblem, path) -> None:
    """Write the SDPA sparse (``.dat-s``) form; floats use shortest round-trip text."""
    lines = ['"feasibility SDP: tr(F_c Y) = c_c, Y >= 0 (zero objective)']
    if problem.block_names:
        lines.append("* blocks: " + " ".join(problem.block_names))
    lines.append(f"{problem.n_constraints} = mDIM")
    lines.append(f"{len(problem.block_sizes)} = nBLOCK")
    lines.append(" ".join(str(int(n)) for n in problem.block_sizes) + " = bLOCKsTRUCT")
    lines.append(" ".join(repr(float(x)) for x in problem.rhs))
    for k, b, i, j, v in zip(problem.con, problem.blk, problem.row, problem.col, problem.val):
        lines.append(f"{k + 1} {b + 1} {i + 1} {j + 1} {float(v)!r}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


class SdpaFormatError(ValueError):
    pass


def read_sdpa(path) -> SdpProblem:
    """Parse an SDPA sparse file; the exact inverse of :func:`write_sdpa`."""
    names: tuple[str, ...] = ()
    data: list[str] = []
    with open(path, encoding="ascii") as fh:
        for raw in fh:
            line = raw.strip()
            if not line:
                continue
            if line.startswith("*"):
                if line.startswith("* blocks:"):
                    names = tuple(line[len("* blocks:") :].split())
                continue
            if line.startswith('"'):
                continue
            data.append(line)

    def numbers(line: str) -> list[str]:
        head = line.split("=")[0]
        for ch in ",{}()":
            head = head.replace(ch, " ")
        return head.split()

    try:
        m = int(numbers(data[0])[0])
        nblocks = int(numbers(data[1])[0])
        sizes = [int(x) for x in numbers(data[2])]
        if len(sizes) != nblocks:
            raise SdpaFormatError("block structure does not match nBLOCK")
        if any(n <= 0 for n in sizes):
            raise SdpaFormatError("only symmetric (positive size) blocks are supported")
        rhs_tokens: list[str] = []
        pos = 3
        while len(rhs_tokens) < m:
            rhs_tokens += numbers(data[pos])
            pos += 1
        rhs = np.array([float(x) for x in rhs_tokens[:m]])
        rows = [ln.split() for ln in data[pos:]]
    except (IndexError, ValueError) as exc:
        raise SdpaFormatError(f"malformed SDPA header: {exc}") from None
    con, blk, r, c, v = [], [], [], [], []
    for toks in rows:
        if len(toks) != 5:
            raise SdpaFormatError(f"expected 5 fields, got {toks!r}")
        try:
            k, b, i, j = (int(t) for t in toks[:4])
            value = float(toks[4])
        except ValueError:
            raise SdpaFormatError(f"bad entry line {' '.join(toks)!r}") from None
        if k == 0:
            if value != 0.0:
                raise SdpaFormatError("nonzero objective entries are not supported")
            continue
        if i > j:
            i, j = j, i
        con.append(k - 1)
        blk.append(b - 1)
        r.append(i - 1)
        c.append(j - 1)
        v.append(value)
    try:
        return SdpProblem(tuple(sizes), rhs, con, blk, r, c, v, names)
    except ValueError as exc:
        raise SdpaFormatError(str(exc)) from None


# ---------------------------------------------------------------------------
# assembly


def _float_op(P: PiOperator) -> PiOperator:
    return P if not P.exact else P.to_float()


_PAIR_CHUNK = 1024


def _sandwich_pieces(X: PiOperator, Y: PiOperator):
    """Arrays ``G`` with ``G[:, p*m + q]`` the operator ``X*[:, p] ∘ Y[q, :]``.

    So ``X* M Y = Σ_pq M_pq G_pq`` for any constant matrix ``M``.
    """
    X, Y = _float_op(X), _float_op(Y)
    m = X.shape[0]
    if Y.shape[0] != m:
        raise DimensionError("sandwich factors must have the same number of rows")
    Xs = adjoint(X)
    pairs = np.arange(m * m)
    pieces = []
    for lo in range(0, m * m, _PAIR_CHUNK):
        chunk = pairs[lo : lo + _PAIR_CHUNK]
        p_idx, q_idx = chunk // m, chunk % m
        Xe = PiOperator(
            PolyMat1(Xs.R0.coeffs[:, p_idx], exact=False),
            PolyMat2(Xs.R1.coeffs[:, p_idx], exact=False),
            PolyMat2(Xs.R2.coeffs[:, p_idx], exact=False),
            X.a,
            X.b,
        )
        Ye = PiOperator(
            PolyMat1(Y.R0.coeffs[q_idx], exact=False),
            PolyMat2(Y.R1.coeffs[q_idx], exact=False),
            PolyMat2(Y.R2.coeffs[q_idx], exact=False),
            Y.a,
            Y.b,
        )
        pieces.append(compose_unsummed(Xe, Ye))
    return tuple(_concat_pairs([pc[i] for pc in pieces]) for i in range(3))


def _concat_pairs(arrays: list[np.ndarray]) -> np.ndarray:
    """Join chunked piece arrays along the pair axis, padding degrees."""
    shape = [max(a.shape[ax] for a in arrays) for ax in range(arrays[0].ndim)]
    shape[1] = sum(a.shape[1] for a in arrays)
    out = np.zeros(shape)
    pos = 0
    for a in arrays:
        idx = (slice(None), slice(pos, pos + a.shape[1])) + tuple(slice(0, n) for n in a.shape[2:])
        out[idx] = a
        pos += a.shape[1]
    return out


def _adjoint_pieces(G):
    G0, G1, G2 = G
    return (
        G0.transpose(2, 1, 0, 3),
        G2.transpose(2, 1, 0, 4, 3),
        G1.transpose(2, 1, 0, 4, 3),
    )


class _RowLayout:
    """Index of the scalar equalities: upper-triangle R0 entries, then R1 entries.

    R2 equalities are implied: both sides are self-adjoint, so the upper
    kernel is the swapped transpose of the lower one.
    """

    def __init__(self, nx: int, d0: int, d1s: int, d1t: int):
        self.nx, self.d0, self.d1s, self.d1t = nx, d0, d1s, d1t
        self.iu = np.triu_indices(nx)

    def rows_of(self, R0: np.ndarray, R1: np.ndarray) -> np.ndarray:
        """Stack ``R0[(i, K, j, deg)]`` and ``R1[(i, K, j, ds, dt)]`` into ``(rows, K)``.

        Missing trailing degrees are zero-padded.
        """
        nx, K = R0.shape[0], R0.shape[1]
        a0 = np.zeros((nx, K, nx, self.d0))
        a0[..., : R0.shape[3]] = R0
        a1 = np.zeros((nx, K, nx, self.d1s, self.d1t))
        a1[..., : R1.shape[3], : R1.shape[4]] = R1
        part0 = a0[self.iu[0], :, self.iu[1], :]  # (npairs, K, d0)
        part0 = part0.transpose(0, 2, 1).reshape(-1, K)
        part1 = a1.transpose(0, 2, 3, 4, 1).reshape(-1, K)
        return np.vstack([part0, part1])

    def describe(self, r: int) -> str:
        n0 = len(self.iu[0]) * self.d0
        if r < n0:
            pair, k = divmod(r, self.d0)
            return f"R0[{self.iu[0][pair]},{self.iu[1][pair]}] coefficient of s^{k}"
        r -= n0
        i, rest = divmod(r, self.nx * self.d1s * self.d1t)
        j, rest = divmod(rest, self.d1s * self.d1t)
        ks, kt = divmod(rest, self.d1t)
        return f"R1[{i},{j}] coefficient of s^{ks} th^{kt}"


def _operator_rows(P: PiOperator) -> tuple[np.ndarray, np.ndarray]:
    P = _float_op(P)
    return P.R0.coeffs[:, None], P.R1.coeffs[:, None]


def _symmetrize_columns(A: np.ndarray, m: int) -> np.ndarray:
    """Turn coefficients of vec(M) into upper-triangle SDPA values (tr semantics)."""
    A3 = A.reshape(A.shape[0], m, m)
    S = 0.5 * (A3 + A3.transpose(0, 2, 1))
    iu = np.triu_indices(m)
    return S[:, iu[0], iu[1]], iu


@dataclass
class LpiContext:
    pie: PieSystem
    param_R: PositivePiParam
    param_H: PositivePiParam
    alpha: float
    delta: float
    layout: _RowLayout
    row_scale: np.ndarray


def lyapunov_degree_bound(pie: PieSystem, d: int) -> int:
    """A generous cap on the slack degree worth trying."""
    degs = [pie.T.R0.degree, pie.A.R0.degree, *pie.T.R1.degrees, *pie.A.R1.degrees, *pie.T.R2.degrees, *pie.A.R2.degrees]
    return 2 * d + 2 * max(degs) + 6


def assemble_lpi(
    pie: PieSystem,
    d: int,
    alpha: float = 1e-4,
    delta: float = 1e-4,
    h_degree: int | None = None,
    basis: str = DEFAULT_BASIS,
) -> SdpProblem:
    """Feasibility SDP for the Lyapunov identity with multipliers of degree ``d``.

    The slack ``H`` uses the same basis; its degree is the smallest value
    ``>= d`` whose monomials cover every coefficient of the left side, unless
    ``h_degree`` fixes it, in which case too small a value raises
    :class:`DegreeTooSmallError`.
    """
    if d < 0:
        raise ValueError("degree must be nonnegative")
    if not (alpha > 0 and delta > 0):
        raise ValueError("alpha and delta must be positive")
    nx = pie.partition.nx
    a, b = pie.a, pie.b
    T, A = pie.T.to_float(), pie.A.to_float()
    pR = PositivePiParam(d, nx, a, b, Fraction(alpha), basis)
    Z = pR.zop(exact=False)
    WT, WA = compose(Z, T), compose(Z, A)
    G = _sandwich_pieces(WT, WA)
    Gs = _adjoint_pieces(G)
    left = [-_add_arrays(g, gs) for g, gs in zip(G, Gs)]
    TA = compose(adjoint(T), A)
    rhs_op = (TA + adjoint(TA)).scale(alpha) + compose(adjoint(T), T).scale(delta)

    def try_degree(dh: int):
        pH = PositivePiParam(dh, nx, a, b, Fraction(0), basis)
        Zh = pH.zop(exact=False)
        H = [-g for g in _sandwich_pieces(Zh, Zh)]
        r0, r1 = _operator_rows(rhs_op)
        d0 = max(x.shape[3] for x in (left[0], H[0], r0))
        d1s = max(x.shape[3] for x in (left[1], H[1], r1))
        d1t = max(x.shape[4] for x in (left[1], H[1], r1))
        lay = _RowLayout(nx, d0, d1s, d1t)
        AR = lay.rows_of(left[0], left[1])
        AH = lay.rows_of(H[0], H[1])
        c = lay.rows_of(r0, r1)[:, 0]
        tol = 1e-12 * max(1.0, np.abs(AR).max(), np.abs(AH).max(), np.abs(c).max())
        has_left = (np.abs(AR).max(axis=1) > tol) | (np.abs(c) > tol)
        has_right = np.abs(AH).max(axis=1) > tol
        uncovered = np.flatnonzero(has_left & ~has_right)
        return pH, lay, AR, AH, c, uncovered, tol

    if h_degree is not None:
        pH, lay, AR, AH, c, uncovered, tol = try_degree(h_degree)
        if uncovered.size:
            raise DegreeTooSmallError(
                f"slack degree {h_degree} cannot match {lay.describe(int(uncovered[0]))}; increase degree"
            )
    else:
        cap = lyapunov_degree_bound(pie, d)
        for dh in range(d, cap + 1):
            pH, lay, AR, AH, c, uncovered, tol = try_degree(dh)
            if not uncovered.size:
                break
        else:
            raise DegreeTooSmallError(
                f"no slack degree up to {cap} matches {lay.describe(int(uncovered[0]))}; increase degree"
            )

    keep = (np.abs(AR).max(axis=1) > tol) | (np.abs(AH).max(axis=1) > tol) | (np.abs(c) > tol)
    AR, AH, c = AR[keep], AH[keep], c[keep]
    scale = np.maximum(np.abs(AR).max(axis=1), np.abs(AH).max(axis=1))
    scale = np.maximum(scale, np.abs(c))
    scale[scale == 0] = 1.0
    AR, AH, c = AR / scale[:, None], AH / scale[:, None], c / scale

    con, blk, row, col, val = [], [], [], [], []
    for b_i, (Ablk, m) in enumerate(((AR, pR.size), (AH, pH.size))):
        vals, iu = _symmetrize_columns(Ablk, m)
        k, e = np.nonzero(np.abs(vals) > 1e-14)
        con.append(k)
        blk.append(np.full(k.size, b_i))
        row.append(iu[0][e])
        col.append(iu[1][e])
        val.append(vals[k, e])
    order_keys = np.concatenate(con), np.concatenate(blk), np.concatenate(row), np.concatenate(col)
    perm = np.lexsort((order_keys[3], order_keys[2], order_keys[1], order_keys[0]))
    ctx = LpiContext(pie, pR, pH, float(alpha), float(delta), lay, scale)
    return SdpProblem(
        (pR.size, pH.size),
        c,
        order_keys[0][perm],
        order_keys[1][perm],
        order_keys[2][perm],
        order_keys[3][perm],
        np.concatenate(val)[perm],
        ("M_R", "M_H"),
        ctx,
    )


# ---------------------------------------------------------------------------
# solving


@dataclass
class SolverResult:
    """Raw backend output before verification."""

    status: str  # "solved", "infeasible", "failure"
    Y: list[np.ndarray]
    message: str
    seconds: float


BACKENDS = {"clarabel": "CLARABEL", "scs": "SCS", "cvxopt": "CVXOPT"}


def available_backends() -> list[str]:
    import cvxpy as cp

    installed = set(cp.installed_solvers())
    return [k for k, v in BACKENDS.items() if v in installed]


def solve_sdp(problem: SdpProblem, backend: str = "clarabel", timeout: float | None = None) -> SolverResult:
    """Hand the SDP to a conic solver through cvxpy."""
    import cvxpy as cp
    import scipy.sparse as sp

    key = backend.lower()
    if key not in BACKENDS:
        raise BackendUnavailableError(f"unknown backend {backend!r}; choose from {sorted(BACKENDS)}")
    if BACKENDS[key] not in cp.installed_solvers():
        raise BackendUnavailableError(f"backend {backend!r} is not installed")
    Ys = [cp.Variable((n, n), symmetric=True) for n in problem.block_sizes]
    expr = 0
    for b, n in enumerate(problem.block_sizes):
        sel = problem.blk == b
        k, i, j, v = problem.con[sel], problem.row[sel], problem.col[sel], problem.val[sel]
        # tr(F Y): off-diagonal entries count twice; vec() is column-major
        rows = np.concatenate([k, k[i != j]])
        cols = np.concatenate([i + j * n, (j + i * n)[i != j]])
        vals = np.concatenate([v, v[i != j]])
        F = sp.csr_matrix((vals, (rows, cols)), shape=(problem.n_constraints, n * n))
        expr = expr + F @ cp.vec(Ys[b], order="F")
    cons = [expr == problem.rhs] + [Y >> 0 for Y in Ys]
    prob = cp.Problem(cp.Minimize(0), cons)
    opts = {}
    if timeout is not None:
        if key == "clarabel":
            opts["time_limit"] = float(timeout)
        elif key == "scs":
            opts["time_limit_secs"] = float(timeout)
    t0 = time.perf_counter()
    try:
        prob.solve(solver=BACKENDS[key], **opts)
    except cp.error.SolverError as exc:
        return SolverResult("failure", [], f"solver error: {exc}", time.perf_counter() - t0)
    secs = time.perf_counter() - t0
    status = prob.status
    if status in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        return SolverResult("solved", [np.asarray(Y.value) for Y in Ys], status, secs)
    if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        return SolverResult("infeasible", [], status, secs)
    return SolverResult("failure", [], str(status), secs)


# ---------------------------------------------------------------------------
# certificates


@dataclass
class VerificationReport:
    passed: bool
    equality_residual: float
    scale: float
    realization_residual: float
    min_eig_R: float
    min_eig_H: float
    reasons: list[str]
    norm_R_bound: float = math.nan
    decay_rate: float = math.nan
    overshoot: float = math.nan

    def summary(self) -> str:
        lines = [
            f"equality residual {self.equality_residual:.3e} (scale {self.scale:.3e})",
            f"realization residual {self.realization_residual:.3e}",
            f"min eig M_R {self.min_eig_R:.3e}, min eig M_H {self.min_eig_H:.3e}",
        ]
        if self.passed:
            lines.append(
                f"decay: |x(t)|^2 <= {self.overshoot:.4g} |x(0)|^2 exp(-{self.decay_rate:.4g} t)"
                f" with |R| <= {self.norm_R_bound:.4g}"
            )
            lines.append(
                "note: the rate uses delta/|R|; a factor |T|^2 in the exponent is not justified"
            )
        else:
            lines += [f"failed: {r}" for r in self.reasons]
        return "\n".join(lines)


@dataclass
class StabilityCertificate:
    M_R: np.ndarray
    M_H: np.ndarray
    alpha: float
    delta: float
    param_R: PositivePiParam
    param_H: PositivePiParam
    R: PiOperator
    H: PiOperator
    report: VerificationReport | None = None


@dataclass
class Infeasible:
    message: str
    seconds: float = 0.0


@dataclass
class BackendFailure:
    message: str
    seconds: float = 0.0


EQUALITY_TOL = 1e-6
EIG_TOL = -1e-8


def _max_abs(P: PiOperator) -> float:
    vals = [np.abs(np.asarray(x.coeffs, dtype=float)).max() for x in (P.R0, P.R1, P.R2)]
    return float(max(vals))


def _sup_bound1(p: PolyMat1, a: Fraction, b: Fraction) -> float:
    """Frobenius-norm upper bound of ``p(s)`` over ``[a, b]`` from coefficient sizes."""
    r = max(abs(float(a)), abs(float(b)))
    c = np.abs(np.asarray(p.coeffs, dtype=float))
    powers = r ** np.arange(c.shape[-1])
    return float(np.sqrt(((c * powers).sum(axis=-1) ** 2).sum()))


def _sup_bound2(p: PolyMat2, a: Fraction, b: Fraction) -> float:
    r = max(abs(float(a)), abs(float(b)))
    c = np.abs(np.asarray(p.coeffs, dtype=float))
    ps = r ** np.arange(c.shape[2])
    pt = r ** np.arange(c.shape[3])
    return float(np.sqrt(((c * ps[:, None] * pt[None, :]).sum(axis=(-2, -1)) ** 2).sum()))


def operator_norm_bound(P: PiOperator) -> float:
    """``‖P‖ <= sup‖R0‖ + (b - a)(sup‖R1‖ + sup‖R2‖)`` with coefficient-size sups."""
    w = float(P.b - P.a)
    return _sup_bound1(P.R0, P.a, P.b) + w * (_sup_bound2(P.R1, P.a, P.b) + _sup_bound2(P.R2, P.a, P.b))


def verify_certificate(cert: StabilityCertificate, pie: PieSystem) -> VerificationReport:
    """Check a certificate from scratch in exact arithmetic.

    Realizes ``R`` and ``H`` from the stored matrices, compares them with the
    claimed operators, and evaluates ``-(T* R A + A* R T) - H`` coefficient
    by coefficient.
    """
    reasons = []
    pR = PositivePiParam(cert.param_R.degree, cert.param_R.nx, pie.a, pie.b, Fraction(cert.alpha), cert.param_R.basis)
    pH = PositivePiParam(cert.param_H.degree, cert.param_H.nx, pie.a, pie.b, Fraction(0), cert.param_H.basis)
    MR = np.asarray(cert.M_R, dtype=float)
    MH = np.asarray(cert.M_H, dtype=float)
    if MR.shape != (pR.size, pR.size) or MH.shape != (pH.size, pH.size):
        return VerificationReport(False, math.inf, 1.0, math.inf, -math.inf, -math.inf, ["matrix sizes do not match the parameterization"])
    MR = 0.5 * (MR + MR.T)
    MH = 0.5 * (MH + MH.T)
    eig_R = float(np.linalg.eigvalsh(MR).min())
    eig_H = float(np.linalg.eigvalsh(MH).min())
    T, A = _fast_exact(pie.T), _fast_exact(pie.A)
    R = realize_positive(pR, _exact_matrix(MR))
    H = realize_positive(pH, _exact_matrix(MH)) + compose(adjoint(T), T).scale(to_fraction(cert.delta))
    TRA = compose(adjoint(T), compose(R, A))
    lhs = -(TRA + adjoint(TRA))
    diff = lhs - H
    scale = max(1.0, _max_abs(TRA), _max_abs(H))
    eq_res = _max_abs(diff)
    real_res = max(_max_abs(R.to_float() - cert.R.to_float()), _max_abs(H.to_float() - cert.H.to_float()))
    if not eq_res < EQUALITY_TOL * scale:
        reasons.append(f"Lyapunov identity residual {eq_res:.3e} exceeds {EQUALITY_TOL:g} x scale")
    if not real_res < EQUALITY_TOL * scale:
        reasons.append(f"claimed R or H differs from the realized operator by {real_res:.3e}")
    if not eig_R > EIG_TOL:
        reasons.append(f"M_R has eigenvalue {eig_R:.3e}")
    if not eig_H > EIG_TOL:
        reasons.append(f"M_H has eigenvalue {eig_H:.3e}")
    rep = VerificationReport(not reasons, eq_res, scale, real_res, eig_R, eig_H, reasons)
    if rep.passed:
        k = operator_norm_bound(R)
        rep.norm_R_bound = k
        rep.decay_rate = cert.delta / k
        rep.overshoot = k / cert.alpha
    return rep


def psd_part(Y: np.ndarray) -> np.ndarray:
    """Nearest PSD matrix in Frobenius norm: clip negative eigenvalues.

    Interior-point solvers may stop a hair outside the cone; the clipped
    matrix is what gets verified, so the equality check covers the change.
    """
    Y = 0.5 * (Y + Y.T)
    w, V = np.linalg.eigh(Y)
    return (V * np.maximum(w, 0.0)) @ V.T


def solve(
    problem: SdpProblem,
    backend: str = "clarabel",
    timeout: float | None = None,
) -> StabilityCertificate | Infeasible | BackendFailure:
    """Solve an assembled problem and verify any certificate before returning it.

    A certificate that fails verification comes back as :class:`BackendFailure`
    so callers report "not proven".
    """
    ctx = problem.context
    if ctx is None:
        raise ValueError("problem has no assembly context; use solve_sdp for raw problems")
    try:
        res = solve_sdp(problem, backend, timeout)
    except BackendUnavailableError as exc:
        return BackendFailure(str(exc))
    if res.status == "infeasible":
        return Infeasible(res.message, res.seconds)
    if res.status != "solved":
        return BackendFailure(res.message, res.seconds)
    MR, MH = (psd_part(Y) for Y in res.Y)
    pR, pH = ctx.param_R, ctx.param_H
    R = realize_positive(pR, MR, exact=False)
    H = realize_positive(pH, MH, exact=False) + compose(adjoint(ctx.pie.T), ctx.pie.T).to_float().scale(ctx.delta)
    cert = StabilityCertificate(MR, MH, ctx.alpha, ctx.delta, pR, pH, R, H)
    cert.report = verify_certificate(cert, ctx.pie)
    if not cert.report.passed:
        return BackendFailure("certificate rejected: " + "; ".join(cert.report.reasons), res.seconds)
    return cert


def prove_stability(
    pie: PieSystem,
    d: int,
    alpha: float = 1e-4,
    delta: float = 1e-4,
    backend: str = "clarabel",
    timeout: float | None = None,
    basis: str = DEFAULT_BASIS,
):
    """Assemble and solve; returns the outcome and the assembled problem."""
    problem = assemble_lpi(pie, d, alpha, delta, basis=basis)
    return solve(problem, backend, timeout), problem
