"""Independent numerical cross-checks on a uniform grid.

Nothing here uses the conversion formulas: PI operators are discretized by
trapezoid quadrature of their kernels, and the PDE itself by finite
differences with the boundary conditions eliminated algebraically.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from .conversion import PieSystem, compute_BT
from .pde_model import PdeSystem
from .pi_ops import PiOperator
from .polyalg import eval1_grid, eval2_grid


class OracleError(RuntimeError):
    pass


EigenBackend = Callable[[np.ndarray, np.ndarray | None], np.ndarray]


def numpy_eigs(A: np.ndarray, B: np.ndarray | None = None) -> np.ndarray:
    """Finite (generalized) eigenvalues of a dense real pencil."""
    if B is None:
        return np.linalg.eigvals(A)
    w, beta = scipy.linalg.eig(A, B, right=False, homogeneous_eigvals=True)
    alpha = w
    finite = np.abs(beta) > 1e-12 * np.maximum(np.abs(alpha), 1.0)
    return alpha[finite] / beta[finite]


def grid(a, b, N: int) -> np.ndarray:
    return np.linspace(float(a), float(b), N)


def trapezoid_weights(N: int, h: float) -> tuple[np.ndarray, np.ndarray]:
    """Lower (th <= s_k) and upper (th >= s_k) trapezoid weight matrices."""
    W1 = np.zeros((N, N))
    for k in range(1, N):
        W1[k, : k + 1] = h
        W1[k, 0] = W1[k, k] = h / 2
    W2 = W1[::-1, ::-1].copy()
    return W1, W2


def _blocks_to_matrix(K: np.ndarray) -> np.ndarray:
    """(N, N, p, q) node/node/component array -> (p N, q N) component-major."""
    N, _, p, q = K.shape
    return K.transpose(2, 0, 3, 1).reshape(p * N, q * N)


def discretize_pi(P: PiOperator, N: int) -> np.ndarray:
    """Collocation matrix of ``P`` on ``N`` uniform nodes, component-major."""
    if N < 8:
        raise ValueError("need at least 8 nodes")
    s = grid(P.a, P.b, N)
    h = s[1] - s[0]
    p, q = P.shape
    W1, W2 = trapezoid_weights(N, h)
    K = eval2_grid(P.R1, s, s) * W1[:, :, None, None] + eval2_grid(P.R2, s, s) * W2[:, :, None, None]
    R0 = eval1_grid(P.R0, s)
    K[np.arange(N), np.arange(N)] += R0
    return _blocks_to_matrix(K)


def l2_weights(a, b, N: int) -> np.ndarray:
    h = (float(b) - float(a)) / (N - 1)
    w = np.full(N, h)
    w[0] = w[-1] = h / 2
    return w


@dataclass
class DiscretizedPair:
    grid: np.ndarray
    Td: np.ndarray
    Ad: np.ndarray


def discretize_pie(pie: PieSystem, N: int) -> DiscretizedPair:
    T, A = pie.T.to_float(), pie.A.to_float()
    return DiscretizedPair(grid(pie.a, pie.b, N), discretize_pi(T, N), discretize_pi(A, N))


def pie_eigenvalues(pie: PieSystem, N: int = 200, backend: EigenBackend = numpy_eigs) -> np.ndarray:
    """Finite generalized eigenvalues of ``Ad v = mu Td v``, rightmost first."""
    d = discretize_pie(pie, N)
    if np.linalg.matrix_rank(d.Td) == 0:
        raise OracleError("discretized T vanishes; system inadmissible or N too small")
    mu = backend(d.Ad, d.Td)
    if mu.size == 0:
        raise OracleError("no finite eigenvalues; try a larger N")
    return mu[np.argsort(-mu.real, kind="stable")]


def spectral_abscissa(pie: PieSystem, N: int = 200, backend: EigenBackend = numpy_eigs) -> float:
    return float(pie_eigenvalues(pie, N, backend)[0].real)


def simulate(pie: PieSystem, x0: np.ndarray, dt: float, t_end: float, N: int | None = None):
    """Backward Euler on ``Td ẋ = Ad x``; returns ``(times, L2 norms of x_f)``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x0, dtype=float).reshape(-1)
    nx = pie.partition.nx
    if N is None:
        N = x.size // nx
    d = discretize_pie(pie, N)
    w = np.tile(l2_weights(pie.a, pie.b, N), nx)
    lhs = d.Td - dt * d.Ad
    try:
        lu = scipy.linalg.lu_factor(lhs, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise OracleError(f"implicit step matrix is singular: {exc}") from None
    steps = int(round(t_end / dt))
    times = [0.0]
    norms = [float(np.sqrt(w @ (x * x)))]
    for k in range(steps):
        x = scipy.linalg.lu_solve(lu, d.Td @ x)
        times.append((k + 1) * dt)
        norms.append(float(np.sqrt(w @ (x * x))))
    return np.array(times), np.array(norms)


# ---------------------------------------------------------------------------
# finite differences for the PDE itself


def _first_derivative(N: int, h: float) -> np.ndarray:
    D = np.zeros((N, N))
    i = np.arange(1, N - 1)
    D[i, i - 1] = -0.5 / h
    D[i, i + 1] = 0.5 / h
    D[0, :3] = np.array([-3.0, 4.0, -1.0]) / (2 * h)
    D[N - 1, N - 3 :] = np.array([1.0, -4.0, 3.0]) / (2 * h)
    return D


def _second_derivative(N: int, h: float) -> np.ndarray:
    D = np.zeros((N, N))
    i = np.arange(1, N - 1)
    D[i, i - 1] = 1.0 / h**2
    D[i, i] = -2.0 / h**2
    D[i, i + 1] = 1.0 / h**2
    D[0, :4] = np.array([2.0, -5.0, 4.0, -1.0]) / h**2
    D[N - 1, N - 4 :] = np.array([-1.0, 4.0, -5.0, 2.0]) / h**2
    return D


@dataclass
class FiniteDifferenceModel:
    """Discretized PDE as the pencil ``E v' = F v`` on retained node values."""

    grid: np.ndarray
    E: np.ndarray
    F: np.ndarray
    retained: np.ndarray
    eliminated: np.ndarray


def _compact_difference(N: int, h: float) -> np.ndarray:
    D = np.zeros((N - 1, N))
    i = np.arange(N - 1)
    D[i, i] = -1.0 / h
    D[i, i + 1] = 1.0 / h
    return D


def _averaging(N: int) -> np.ndarray:
    M = np.zeros((N - 1, N))
    i = np.arange(N - 1)
    M[i, i] = M[i, i + 1] = 0.5
    return M


def discretize_pde(sys: PdeSystem, N: int = 200) -> FiniteDifferenceModel:
    """Finite-difference pencil with boundary rows solved out exactly.

    Each state keeps its own collocation rows: every node for undifferentiated
    states, cell midpoints for first-order states (a box scheme, which keeps
    transport-type equations free of spurious neutral modes) and interior
    nodes for second-order states. Integral terms use trapezoid sums over the
    nodes; at a midpoint they are the mean of the two neighbouring node sums.
    """
    if not compute_BT(sys).admissible:
        raise OracleError("boundary conditions are not admissible")
    n = sys.partition
    nx, nS, nD = n.nx, n.nS, n.nD
    s = grid(sys.a, sys.b, N)
    h = s[1] - s[0]
    mid = 0.5 * (s[:-1] + s[1:])
    I = np.eye(N)
    D1, D2 = _first_derivative(N, h), _second_derivative(N, h)
    Dc, Av = _compact_difference(N, h), _averaging(N)
    sl = n.slots()
    kinds = ["x0"] * n.n0 + ["x1"] * n.n1 + ["x2"] * n.n2

    def sample_ops(loc: str):
        """Per-state operators giving (value, first, second derivative) at ``loc``."""
        if loc == "node":
            return I, D1, D2
        if loc == "mid":
            return Av, Dc, Av @ D2
        inner = slice(1, N - 1)
        return I[inner], D1[inner], D2[inner]

    def xd_operator(loc: str) -> np.ndarray:
        V, D, DD = sample_ops(loc)
        r = V.shape[0]
        L = np.zeros((nD * r, nx * N))
        pos = {"x0": 0, "x1": 0, "x2": 0}
        for st, kind in enumerate(kinds):
            k = pos[kind]
            pos[kind] += 1
            cols = slice(st * N, (st + 1) * N)
            L[(sl[kind].start + k) * r : (sl[kind].start + k + 1) * r, cols] = V
            if kind == "x1":
                L[(sl["dx1"].start + k) * r : (sl["dx1"].start + k + 1) * r, cols] = D
            if kind == "x2":
                L[(sl["dx2"].start + k) * r : (sl["dx2"].start + k + 1) * r, cols] = D
                L[(sl["ddx2"].start + k) * r : (sl["ddx2"].start + k + 1) * r, cols] = DD
        return L

    L_node = xd_operator("node")
    A0 = sys.A0.to_float()
    integral = PiOperator(A0.scale(0.0), sys.A1.to_float(), sys.A2.to_float(), sys.a, sys.b)
    K = discretize_pi(integral, N) @ L_node  # (nx N, nx N) integral terms at nodes
    loc_of = {"x0": "node", "x1": "mid", "x2": "inner"}
    points = {"node": s, "mid": mid, "inner": s[1:-1]}

    E_rows, F_rows = [], []
    for i, kind in enumerate(kinds):
        loc = loc_of[kind]
        V = sample_ops(loc)[0]
        r = V.shape[0]
        e = np.zeros((r, nx * N))
        e[:, i * N : (i + 1) * N] = V
        E_rows.append(e)
        a0 = eval1_grid(A0, points[loc])[:, i, :]  # (r, nD)
        Lx = xd_operator(loc).reshape(nD, r, nx * N)
        local = np.einsum("rd,drc->rc", a0, Lx)
        F_rows.append(local + V @ K[i * N : (i + 1) * N])
    E = np.vstack(E_rows)
    F = np.vstack(F_rows)

    if nS == 0:
        idx = np.arange(nx * N)
        return FiniteDifferenceModel(s, E, F, idx, np.array([], dtype=int))

    # boundary rows: B x_b - sum_l w_l BI(s_l) x_D(s_l)
    Xc = np.zeros((2 * nS, nx * N))
    rows_c = [("val", st) for st, kind in enumerate(kinds) if kind != "x0"]
    rows_c += [("der", st) for st, kind in enumerate(kinds) if kind == "x2"]
    for side, node in ((0, 0), (1, N - 1)):
        for r, (kind, st) in enumerate(rows_c):
            row = I[node] if kind == "val" else D1[node]
            Xc[side * nS + r, st * N : (st + 1) * N] = row
    w = l2_weights(sys.a, sys.b, N)
    BI = eval1_grid(sys.BI.to_float(), s)  # (N, nbc, nD)
    BIw = (BI * w[:, None, None]).transpose(1, 2, 0).reshape(nS, nD * N)
    C = sys.B.astype(float) @ Xc - BIw @ L_node

    # second-order states lose both end nodes; first-order ones lose one,
    # whichever end gives the best-conditioned elimination
    fixed = []
    for st, kind in enumerate(kinds):
        if kind == "x2":
            fixed += [st * N, st * N + N - 1]
    first = [st for st, kind in enumerate(kinds) if kind == "x1"]
    options = []
    for ends in itertools.product((0, N - 1), repeat=len(first)):
        elim = fixed + [st * N + e for st, e in zip(first, ends)]
        options.append((np.linalg.cond(C[:, elim]), elim))
    cond, elim = min(options, key=lambda t: t[0])
    if not np.isfinite(cond) or cond > 1e12:
        raise OracleError("boundary elimination is rank deficient")
    elim = np.array(sorted(elim))
    keep = np.setdiff1d(np.arange(nx * N), elim)
    Z = np.zeros((nx * N, keep.size))
    Z[keep, np.arange(keep.size)] = 1.0
    Z[elim] = -np.linalg.solve(C[:, elim], C[:, keep])
    return FiniteDifferenceModel(s, E @ Z, F @ Z, keep, elim)


def pde_eigenvalues(sys: PdeSystem, N: int = 200, backend: EigenBackend = numpy_eigs) -> np.ndarray:
    fd = discretize_pde(sys, N)
    mu = backend(fd.F, fd.E)
    return mu[np.argsort(-mu.real, kind="stable")]


def pde_spectrum(sys: PdeSystem, N: int = 200, backend: EigenBackend = numpy_eigs) -> float:
    """Spectral abscissa of the finite-difference PDE."""
    return float(pde_eigenvalues(sys, N, backend)[0].real)


def match_leading(mu_a: np.ndarray, mu_b: np.ndarray, k: int = 3) -> float:
    """Largest relative distance from each of the first ``k`` of ``mu_a`` to ``mu_b``.

    Matching is nearest-neighbour so conjugate pairs in either order agree.
    """
    worst = 0.0
    for m in mu_a[:k]:
        d = np.min(np.abs(mu_b - m))
        worst = max(worst, d / max(abs(m), 1e-12))
    return worst


def mckendrick_crossing(lo: float = 0.5, hi: float = 6.0) -> float:
    """Root of ``(c-2) e^c + c + 2 = c^3``: where ``∫ s(1-s) e^{cs} ds = 1``."""
    from scipy.optimize import brentq

    return brentq(lambda c: (c - 2) * np.exp(c) + c + 2 - c**3, lo, hi, xtol=1e-14)
