"""Matrix-valued polynomials in one variable ``s`` or two variables ``(s, th)``.

Coefficients live in dense numpy arrays.  Exact work uses ``dtype=object``
holding :class:`fractions.Fraction`; numeric work (SDP assembly, oracles) uses
``float64``.  Both kinds go through the same code paths.

Layout::

    PolyMat1.coeffs[i, j, k]     coefficient of s**k in entry (i, j)
    PolyMat2.coeffs[i, j, k, l]  coefficient of s**k * th**l in entry (i, j)

Arrays are trimmed of trailing all-zero degree slices, so two values with the
same entries compare equal.
"""

from __future__ import annotations

import re
from fractions import Fraction
from numbers import Rational
from typing import Iterable, Sequence, Union

import numpy as np

Scalar = Union[int, float, Fraction]
Bound = Union[Scalar, str]  # a constant, or the name of the other variable

EXACT = object
NUMERIC = np.float64


class DimensionError(ValueError):
    """Operand shapes do not fit together."""


class ExpressionError(ValueError):
    """Malformed polynomial expression."""

    def __init__(self, message: str, text: str = "", pos: int = 0):
        self.text = text
        self.pos = pos
        super().__init__(f"{message} at column {pos + 1}" if text else message)


# ---------------------------------------------------------------------------
# coefficient helpers


try:  # optional fast rationals; they interoperate with Fraction
    from gmpy2 import mpq as _mpq

    _EXACT_TYPES: tuple = (Fraction, type(_mpq(0)))
except ImportError:  # pragma: no cover - exercised only without gmpy2
    _mpq = None
    _EXACT_TYPES = (Fraction,)


def fast_rational_array(arr: np.ndarray) -> np.ndarray:
    """Same exact values, stored as gmpy2 rationals when available."""
    if _mpq is None:
        return arr
    out = np.empty(arr.shape, dtype=object)
    flat_in, flat_out = arr.reshape(-1), out.reshape(-1)
    for i, v in enumerate(flat_in):
        flat_out[i] = _mpq(v) if not isinstance(v, Fraction) else _mpq(v.numerator, v.denominator)
    return out


def to_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, (int, np.integer)):
        return Fraction(int(x))
    if isinstance(x, Rational):
        return Fraction(x.numerator, x.denominator)
    if isinstance(x, str):
        return Fraction(x)
    return Fraction(float(x))


def _as_coeff_array(data, exact: bool) -> np.ndarray:
    arr = np.asarray(data, dtype=object if exact else np.float64)
    if exact:
        flat = arr.reshape(-1)
        for idx, v in enumerate(flat):
            if not isinstance(v, _EXACT_TYPES):
                flat[idx] = to_fraction(v)
    return arr


def _is_exact(arr: np.ndarray) -> bool:
    return arr.dtype == object


def _cast(value, like: np.ndarray):
    return to_fraction(value) if _is_exact(like) else float(value)


def _zeros(shape, exact: bool) -> np.ndarray:
    if exact:
        out = np.empty(shape, dtype=object)
        out.fill(Fraction(0))
        return out
    return np.zeros(shape)


def _common_exactness(*arrays: np.ndarray) -> bool:
    return all(_is_exact(a) for a in arrays)


def _promote(arr: np.ndarray, exact: bool) -> np.ndarray:
    if exact or not _is_exact(arr):
        return arr
    return arr.astype(np.float64)


def _trim(arr: np.ndarray, naxes: int) -> np.ndarray:
    """Drop trailing zero slices along the last ``naxes`` axes."""
    for ax in range(arr.ndim - naxes, arr.ndim):
        n = arr.shape[ax]
        while n > 1:
            sl = np.take(arr, n - 1, axis=ax)
            if np.any(sl != 0):
                break
            n -= 1
        if n != arr.shape[ax]:
            arr = np.take(arr, range(n), axis=ax)
    return arr


def _pad_to(arr: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    if tuple(arr.shape) == tuple(shape):
        return arr
    out = _zeros(shape, _is_exact(arr))
    out[tuple(slice(0, n) for n in arr.shape)] = arr
    return out


def _add_arrays(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    exact = _common_exactness(x, y)
    x, y = _promote(x, exact), _promote(y, exact)
    shape = tuple(max(p, q) for p, q in zip(x.shape, y.shape))
    return _pad_to(x, shape) + _pad_to(y, shape)


def _mk1(arr: np.ndarray) -> "PolyMat1":
    obj = PolyMat1.__new__(PolyMat1)
    obj.coeffs = _trim(arr, 1)
    return obj


def _mk2(arr: np.ndarray) -> "PolyMat2":
    obj = PolyMat2.__new__(PolyMat2)
    obj.coeffs = _trim(arr, 2)
    return obj


# ---------------------------------------------------------------------------
# univariate


class PolyMat1:
    """Matrix of polynomials in ``s``."""

    __slots__ = ("coeffs",)

    def __init__(self, coeffs, exact: bool | None = None):
        arr = np.asarray(coeffs) if not isinstance(coeffs, np.ndarray) else coeffs
        if exact is None:
            exact = arr.dtype == object or np.issubdtype(arr.dtype, np.integer)
        arr = _as_coeff_array(arr, exact)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise DimensionError(f"bad coefficient array shape {arr.shape}")
        if arr.shape[2] == 0:
            arr = _zeros(arr.shape[:2] + (1,), exact)
        self.coeffs = _trim(arr, 1)

    # constructors -------------------------------------------------------
    @classmethod
    def zeros(cls, rows: int, cols: int, exact: bool = True) -> "PolyMat1":
        return cls(_zeros((rows, cols, 1), exact), exact)

    @classmethod
    def identity(cls, n: int, exact: bool = True) -> "PolyMat1":
        arr = _zeros((n, n, 1), exact)
        for i in range(n):
            arr[i, i, 0] = Fraction(1) if exact else 1.0
        return cls(arr, exact)

    @classmethod
    def constant(cls, matrix, exact: bool = True) -> "PolyMat1":
        m = np.asarray(matrix, dtype=object if exact else np.float64)
        if m.ndim == 0:
            m = m.reshape(1, 1)
        return cls(m[:, :, None], exact)

    @classmethod
    def from_lists(cls, entries: Sequence[Sequence[Sequence[Scalar]]]) -> "PolyMat1":
        """Build from ``entries[i][j] = [c0, c1, ...]`` (ascending degree)."""
        rows, cols = len(entries), len(entries[0])
        deg = max(len(c) for row in entries for c in row) or 1
        arr = _zeros((rows, cols, deg), True)
        for i, row in enumerate(entries):
            if len(row) != cols:
                raise DimensionError("ragged entry list")
            for j, c in enumerate(row):
                for k, v in enumerate(c):
                    arr[i, j, k] = to_fraction(v)
        return cls(arr, True)

    @classmethod
    def monomial(cls, degree: int, exact: bool = True) -> "PolyMat1":
        arr = _zeros((1, 1, degree + 1), exact)
        arr[0, 0, degree] = Fraction(1) if exact else 1.0
        return cls(arr, exact)

    # properties ---------------------------------------------------------
    @property
    def shape(self) -> tuple[int, int]:
        return self.coeffs.shape[0], self.coeffs.shape[1]

    @property
    def degree(self) -> int:
        return self.coeffs.shape[2] - 1

    @property
    def exact(self) -> bool:
        return _is_exact(self.coeffs)

    def is_zero(self) -> bool:
        return not np.any(self.coeffs != 0)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PolyMat1):
            return NotImplemented
        return self.coeffs.shape == other.coeffs.shape and bool(
            np.all(self.coeffs == other.coeffs)
        )

    def __hash__(self):
        return hash((self.shape, tuple(self.coeffs.reshape(-1).tolist())))

    def __repr__(self) -> str:
        return f"PolyMat1({format_matrix(self)})"

    # conversions ----------------------------------------------------------
    def to_float(self) -> "PolyMat1":
        return _mk1(self.coeffs.astype(np.float64))

    def to_exact(self) -> "PolyMat1":
        return self if self.exact else PolyMat1(self.coeffs, exact=True)

    def entry(self, i: int, j: int) -> list:
        c = _trim(self.coeffs[i : i + 1, j : j + 1], 1)[0, 0]
        return list(c)

    def as_s(self) -> "PolyMat2":
        """Same polynomial viewed as a function of (s, th) depending on s only."""
        return _mk2(self.coeffs[:, :, :, None])

    def as_th(self) -> "PolyMat2":
        """Same polynomial with its variable renamed to th."""
        return _mk2(self.coeffs[:, :, None, :])

    # arithmetic -----------------------------------------------------------
    def __add__(self, other: "PolyMat1") -> "PolyMat1":
        if isinstance(other, PolyMat2):
            return self.as_s() + other
        if self.shape != other.shape:
            raise DimensionError(f"cannot add {self.shape} and {other.shape}")
        return _mk1(_add_arrays(self.coeffs, other.coeffs))

    def __neg__(self) -> "PolyMat1":
        return _mk1(-self.coeffs)

    def __sub__(self, other) -> "PolyMat1":
        return self + (-other)

    def scale(self, c: Scalar) -> "PolyMat1":
        return _mk1(self.coeffs * _cast(c, self.coeffs))

    def __matmul__(self, other):
        if isinstance(other, PolyMat2):
            return self.as_s() @ other
        if self.shape[1] != other.shape[0]:
            raise DimensionError(f"cannot multiply {self.shape} by {other.shape}")
        exact = self.exact and other.exact
        x, y = _promote(self.coeffs, exact), _promote(other.coeffs, exact)
        out = _zeros((x.shape[0], y.shape[1], x.shape[2] + y.shape[2] - 1), exact)
        for k in range(y.shape[2]):
            out[:, :, k : k + x.shape[2]] += np.einsum("ika,kj->ija", x, y[:, :, k])
        return _mk1(out)

    @property
    def T(self) -> "PolyMat1":
        return _mk1(self.coeffs.transpose(1, 0, 2))

    def __getitem__(self, key) -> "PolyMat1":
        r, c = key
        rr = r if isinstance(r, slice) else ([r] if np.isscalar(r) else r)
        cc = c if isinstance(c, slice) else ([c] if np.isscalar(c) else c)
        sub = self.coeffs[rr][:, cc]
        return _mk1(sub)

    # calculus -------------------------------------------------------------
    def derivative(self, order: int = 1) -> "PolyMat1":
        c = self.coeffs
        for _ in range(order):
            if c.shape[2] == 1:
                c = _zeros(c.shape, self.exact)
                continue
            k = np.arange(1, c.shape[2])
            mult = np.array([_cast(v, c) for v in k], dtype=c.dtype)
            c = c[:, :, 1:] * mult
        return _mk1(c)

    def antiderivative(self) -> "PolyMat1":
        c = self.coeffs
        div = np.array([_cast(Fraction(1, k + 1), c) for k in range(c.shape[2])], dtype=c.dtype)
        out = _zeros(c.shape[:2] + (c.shape[2] + 1,), self.exact)
        out[:, :, 1:] = c * div
        return _mk1(out)

    def integrate(self, lower: Scalar, upper: Scalar) -> np.ndarray:
        """Definite integral over ``[lower, upper]`` as a plain matrix."""
        F = self.antiderivative()
        return F(upper) - F(lower)

    def __call__(self, s) -> np.ndarray:
        return eval1(self, s)

    def subst(self, expr: "AffineExpr") -> "PolyMat2":
        return subst_shift(self, expr)


# ---------------------------------------------------------------------------
# bivariate


class PolyMat2:
    """Matrix of polynomials in ``(s, th)``."""

    __slots__ = ("coeffs",)

    def __init__(self, coeffs, exact: bool | None = None):
        arr = np.asarray(coeffs) if not isinstance(coeffs, np.ndarray) else coeffs
        if exact is None:
            exact = arr.dtype == object or np.issubdtype(arr.dtype, np.integer)
        arr = _as_coeff_array(arr, exact)
        if arr.ndim != 4:
            raise DimensionError(f"bad coefficient array shape {arr.shape}")
        self.coeffs = _trim(arr, 2)

    @classmethod
    def zeros(cls, rows: int, cols: int, exact: bool = True) -> "PolyMat2":
        return cls(_zeros((rows, cols, 1, 1), exact), exact)

    @classmethod
    def from_dict(cls, rows: int, cols: int, terms: dict) -> "PolyMat2":
        """``terms[(i, j)] = {(ds, dth): coeff}``."""
        ds = max([k[0] for t in terms.values() for k in t] or [0]) + 1
        dt = max([k[1] for t in terms.values() for k in t] or [0]) + 1
        arr = _zeros((rows, cols, ds, dt), True)
        for (i, j), t in terms.items():
            for (p, q), v in t.items():
                arr[i, j, p, q] = to_fraction(v)
        return cls(arr, True)

    @property
    def shape(self) -> tuple[int, int]:
        return self.coeffs.shape[0], self.coeffs.shape[1]

    @property
    def degrees(self) -> tuple[int, int]:
        return self.coeffs.shape[2] - 1, self.coeffs.shape[3] - 1

    @property
    def exact(self) -> bool:
        return _is_exact(self.coeffs)

    def is_zero(self) -> bool:
        return not np.any(self.coeffs != 0)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PolyMat2):
            return NotImplemented
        return self.coeffs.shape == other.coeffs.shape and bool(
            np.all(self.coeffs == other.coeffs)
        )

    def __hash__(self):
        return hash((self.shape, tuple(self.coeffs.reshape(-1).tolist())))

    def __repr__(self) -> str:
        return f"PolyMat2({format_matrix(self)})"

    def to_float(self) -> "PolyMat2":
        return _mk2(self.coeffs.astype(np.float64))

    def to_exact(self) -> "PolyMat2":
        return self if self.exact else PolyMat2(self.coeffs, exact=True)

    def __add__(self, other) -> "PolyMat2":
        if isinstance(other, PolyMat1):
            other = other.as_s()
        if self.shape != other.shape:
            raise DimensionError(f"cannot add {self.shape} and {other.shape}")
        return _mk2(_add_arrays(self.coeffs, other.coeffs))

    def __neg__(self) -> "PolyMat2":
        return _mk2(-self.coeffs)

    def __sub__(self, other) -> "PolyMat2":
        return self + (-other)

    def scale(self, c: Scalar) -> "PolyMat2":
        return _mk2(self.coeffs * _cast(c, self.coeffs))

    def __matmul__(self, other) -> "PolyMat2":
        if isinstance(other, PolyMat1):
            other = other.as_s()
        if self.shape[1] != other.shape[0]:
            raise DimensionError(f"cannot multiply {self.shape} by {other.shape}")
        exact = self.exact and other.exact
        x, y = _promote(self.coeffs, exact), _promote(other.coeffs, exact)
        ds = x.shape[2] + y.shape[2] - 1
        dt = x.shape[3] + y.shape[3] - 1
        out = _zeros((x.shape[0], y.shape[1], ds, dt), exact)
        for p in range(y.shape[2]):
            for q in range(y.shape[3]):
                out[:, :, p : p + x.shape[2], q : q + x.shape[3]] += np.einsum(
                    "ikab,kj->ijab", x, y[:, :, p, q]
                )
        return _mk2(out)

    @property
    def T(self) -> "PolyMat2":
        """Matrix transpose (variables unchanged)."""
        return _mk2(self.coeffs.transpose(1, 0, 2, 3))

    def swap(self) -> "PolyMat2":
        """Exchange the roles of s and th."""
        return _mk2(self.coeffs.transpose(0, 1, 3, 2))

    def __getitem__(self, key) -> "PolyMat2":
        r, c = key
        rr = r if isinstance(r, slice) else ([r] if np.isscalar(r) else r)
        cc = c if isinstance(c, slice) else ([c] if np.isscalar(c) else c)
        return _mk2(self.coeffs[rr][:, cc])

    def only_s(self) -> PolyMat1:
        """Drop to a PolyMat1; requires no th dependence."""
        if self.coeffs.shape[3] != 1:
            raise DimensionError("polynomial depends on th")
        return _mk1(self.coeffs[:, :, :, 0])

    def only_th(self) -> PolyMat1:
        """Drop to a PolyMat1 in the th variable; requires no s dependence."""
        if self.coeffs.shape[2] != 1:
            raise DimensionError("polynomial depends on s")
        return _mk1(self.coeffs[:, :, 0, :])

    def __call__(self, s, th) -> np.ndarray:
        return eval2(self, s, th)


# ---------------------------------------------------------------------------
# evaluation


def _horner(c: np.ndarray, x):
    """Evaluate along the last axis."""
    acc = c[..., -1]
    for k in range(c.shape[-1] - 2, -1, -1):
        acc = acc * x + c[..., k]
    return acc


def eval1(p: PolyMat1, s) -> np.ndarray:
    """Entrywise Horner evaluation; exact for rational ``s`` and exact ``p``."""
    if p.exact and isinstance(s, (int, Fraction, Rational)):
        return _horner(p.coeffs, to_fraction(s))
    return _horner(p.coeffs.astype(np.float64), float(s)).astype(np.float64)


def eval2(p: PolyMat2, s, th) -> np.ndarray:
    exact = p.exact and all(isinstance(v, (int, Fraction, Rational)) for v in (s, th))
    if exact:
        inner = _horner(p.coeffs, to_fraction(th))
        return _horner(inner, to_fraction(s))
    inner = _horner(p.coeffs.astype(np.float64), float(th))
    return _horner(inner, float(s))


def eval1_grid(p: PolyMat1, grid: np.ndarray) -> np.ndarray:
    """Evaluate at many points; returns ``(len(grid), rows, cols)`` floats."""
    c = p.coeffs.astype(np.float64)
    g = np.asarray(grid, dtype=np.float64)
    V = g[:, None] ** np.arange(c.shape[2])[None, :]
    return np.einsum("ijk,nk->nij", c, V)


def eval2_grid(p: PolyMat2, s_grid: np.ndarray, th_grid: np.ndarray) -> np.ndarray:
    """Evaluate on a tensor grid; returns ``(len(s), len(th), rows, cols)``."""
    c = p.coeffs.astype(np.float64)
    S = np.asarray(s_grid, float)[:, None] ** np.arange(c.shape[2])[None, :]
    Th = np.asarray(th_grid, float)[:, None] ** np.arange(c.shape[3])[None, :]
    return np.einsum("ijkl,nk,ml->nmij", c, S, Th)


# ---------------------------------------------------------------------------
# integration


def _bound_kind(bound: Bound) -> str:
    if isinstance(bound, str):
        if bound not in ("s", "th"):
            raise ExpressionError(f"malformed bound {bound!r}")
        return bound
    return "const"


def _power_column(arr: np.ndarray, bound, m: int):
    return _cast(bound, arr) ** m


def integrate(p: PolyMat2, var: str, lower: Bound, upper: Bound) -> PolyMat1:
    """Integrate ``p(s, th)`` over ``var`` between two bounds.

    Each bound is a constant or the name of the *other* variable.  The
    result depends on the other variable only and is returned as a PolyMat1
    in that variable.
    """
    if var not in ("s", "th"):
        raise ExpressionError(f"unknown integration variable {var!r}")
    other = "th" if var == "s" else "s"
    for bound in (lower, upper):
        kind = _bound_kind(bound)
        if kind not in ("const", other):
            raise ExpressionError(f"bound {bound!r} not allowed when integrating over {var}")
    c = p.coeffs if var == "th" else p.coeffs.transpose(0, 1, 3, 2)
    # c[i, j, k_other, l_var]
    exact = p.exact
    rows, cols, dk, dl = c.shape
    out = _zeros((rows, cols, dk + dl), exact)
    for l in range(dl):
        m = l + 1
        w = _cast(Fraction(1, m), c)
        term = c[:, :, :, l] * w
        for bound, sign in ((upper, 1), (lower, -1)):
            if isinstance(bound, str):
                out[:, :, m : m + dk] += term if sign > 0 else -term
            else:
                factor = _power_column(c, bound, m)
                out[:, :, :dk] += term * factor if sign > 0 else -(term * factor)
    return _mk1(out)


def int_dtheta(p: PolyMat2, lower: Bound, upper: Bound) -> PolyMat1:
    """``∫_lower^upper p(s, th) dth``; bounds are constants or ``"s"``."""
    return integrate(p, "th", lower, upper)


def int_product(
    left: PolyMat2,
    right: PolyMat2,
    lower: Bound,
    upper: Bound,
    keep_inner: bool = False,
):
    """``∫ left(s, b) right(b, th) db`` with bounds in {const, "s", "th"}.

    Returns a PolyMat2 in (s, th).  With ``keep_inner`` the matrix product is
    not summed over the inner index and a raw array of shape
    ``(p, k, q, Ds, Dth)`` is returned instead.
    """
    if left.shape[1] != right.shape[0]:
        raise DimensionError(f"cannot multiply {left.shape} by {right.shape}")
    for bound in (lower, upper):
        _bound_kind(bound)
    exact = left.exact and right.exact
    A = _promote(left.coeffs, exact)  # [p, k, Ds, Db]
    B = _promote(right.coeffs, exact)  # [k, q, Db', Dt]
    p, k = A.shape[:2]
    q = B.shape[1]
    ds, db, db2, dt = A.shape[2], A.shape[3], B.shape[2], B.shape[3]
    nm = db + db2 - 1
    if keep_inner:
        grouped = _zeros((nm, p, k, q, ds, dt), exact)
        spec = "pka,kqc->pkqac"
    else:
        grouped = _zeros((nm, p, q, ds, dt), exact)
        spec = "pka,kqc->pqac"
    for i in range(db):
        Ai = A[:, :, :, i]
        for j in range(db2):
            Bj = B[:, :, j, :]
            if exact:
                if not (np.any(Ai != 0) and np.any(Bj != 0)):
                    continue
            grouped[i + j] += np.einsum(spec, Ai, Bj)
    lead = grouped.shape[1:-2]
    out = _zeros(lead + (ds + nm, dt + nm), exact)
    for m in range(nm):
        e = m + 1
        G = grouped[m]
        if exact and not np.any(G != 0):
            continue
        G = G * _cast(Fraction(1, e), G)
        for bound, sign in ((upper, 1), (lower, -1)):
            T = G if sign > 0 else -G
            if bound == "s":
                out[..., e : e + ds, :dt] += T
            elif bound == "th":
                out[..., :ds, e : e + dt] += T
            else:
                out[..., :ds, :dt] += T * _power_column(G, bound, e)
    if keep_inner:
        return _trim(out, 2)
    return _mk2(out)


# ---------------------------------------------------------------------------
# argument substitution


class AffineExpr:
    """``cs*s + cth*th + c0``, used to substitute the argument of a PolyMat1."""

    __slots__ = ("cs", "cth", "c0")

    def __init__(self, cs: Scalar = 0, cth: Scalar = 0, c0: Scalar = 0):
        self.cs, self.cth, self.c0 = to_fraction(cs), to_fraction(cth), to_fraction(c0)

    @classmethod
    def parse(cls, text: str, a: Scalar = 0, b: Scalar = 1) -> "AffineExpr":
        table = {
            "s": cls(1, 0, 0),
            "s-a": cls(1, 0, -to_fraction(a)),
            "s-th": cls(1, -1, 0),
            "th-s": cls(-1, 1, 0),
            "b-s": cls(-1, 0, to_fraction(b)),
            "b-th": cls(0, -1, to_fraction(b)),
            "th-a": cls(0, 1, -to_fraction(a)),
        }
        key = text.replace(" ", "")
        if key not in table:
            raise ExpressionError(f"unsupported shift expression {text!r}")
        return table[key]

    def __repr__(self) -> str:
        return f"AffineExpr({self.cs}*s + {self.cth}*th + {self.c0})"


def subst_shift(p: PolyMat1, expr: AffineExpr | str, a: Scalar = 0, b: Scalar = 1) -> PolyMat2:
    """Replace the variable of ``p`` by an affine expression in (s, th)."""
    if isinstance(expr, str):
        expr = AffineExpr.parse(expr, a, b)
    c = p.coeffs
    exact = p.exact
    deg = c.shape[2] - 1
    cs, ct, c0 = (_cast(v, c) for v in (expr.cs, expr.cth, expr.c0))
    out = _zeros(c.shape[:2] + (deg + 1, deg + 1), exact)
    # (cs*s + ct*th + c0)^k expanded by multinomial theorem
    from math import comb

    for k in range(deg + 1):
        ck = c[:, :, k]
        if exact and not np.any(ck != 0):
            continue
        for i in range(k + 1):
            for j in range(k - i + 1):
                r = k - i - j
                w = comb(k, i) * comb(k - i, j)
                coef = (cs**i) * (ct**j) * (c0**r) * (_cast(w, c))
                if coef == 0:
                    continue
                out[:, :, i, j] += ck * coef
    return _mk2(out)


# ---------------------------------------------------------------------------
# block helpers


def block1(blocks: Sequence[Sequence[PolyMat1]]) -> PolyMat1:
    """Assemble a block matrix of PolyMat1 values."""
    exact = all(b.exact for row in blocks for b in row)
    rows = [r[0].shape[0] for r in blocks]
    cols = [b.shape[1] for b in blocks[0]]
    deg = max(b.coeffs.shape[2] for row in blocks for b in row)
    out = _zeros((sum(rows), sum(cols), deg), exact)
    r0 = 0
    for i, row in enumerate(blocks):
        c0 = 0
        for j, b in enumerate(row):
            if b.shape != (rows[i], cols[j]):
                raise DimensionError("inconsistent block sizes")
            out[r0 : r0 + rows[i], c0 : c0 + cols[j], : b.coeffs.shape[2]] = _promote(b.coeffs, exact)
            c0 += cols[j]
        r0 += rows[i]
    return _mk1(out)


def block2(blocks: Sequence[Sequence[PolyMat2]]) -> PolyMat2:
    exact = all(b.exact for row in blocks for b in row)
    rows = [r[0].shape[0] for r in blocks]
    cols = [b.shape[1] for b in blocks[0]]
    ds = max(b.coeffs.shape[2] for row in blocks for b in row)
    dt = max(b.coeffs.shape[3] for row in blocks for b in row)
    out = _zeros((sum(rows), sum(cols), ds, dt), exact)
    r0 = 0
    for i, row in enumerate(blocks):
        c0 = 0
        for j, b in enumerate(row):
            if b.shape != (rows[i], cols[j]):
                raise DimensionError("inconsistent block sizes")
            bs = b.coeffs.shape
            out[r0 : r0 + rows[i], c0 : c0 + cols[j], : bs[2], : bs[3]] = _promote(b.coeffs, exact)
            c0 += cols[j]
        r0 += rows[i]
    return _mk2(out)


# ---------------------------------------------------------------------------
# expression grammar
#
#   expr   := term (('+'|'-') term)*
#   term   := unary ('*' unary)*
#   unary  := ('+'|'-') unary | power
#   power  := atom ('^' INT)?
#   atom   := NUMBER | NAME | '(' expr ')'
#
# Numbers are integers, decimals (exact) or fractions written ``p/q`` where
# ``/`` is only allowed between two integer literals.

_TOKEN = re.compile(r"\s*(?:(\d+(?:\.\d*)?(?:[eE][-+]?\d+)?|\.\d+(?:[eE][-+]?\d+)?)|([A-Za-z_]\w*)|(.))")


class MPoly:
    """Sparse multivariate polynomial with Fraction coefficients.

    Keys are sorted tuples of ``(name, exponent)`` pairs.
    """

    __slots__ = ("terms",)

    def __init__(self, terms: dict | None = None):
        self.terms = {k: v for k, v in (terms or {}).items() if v != 0}

    @classmethod
    def const(cls, c) -> "MPoly":
        return cls({(): to_fraction(c)})

    @classmethod
    def var(cls, name: str) -> "MPoly":
        return cls({((name, 1),): Fraction(1)})

    def __add__(self, other: "MPoly") -> "MPoly":
        out = dict(self.terms)
        for k, v in other.terms.items():
            out[k] = out.get(k, Fraction(0)) + v
        return MPoly(out)

    def __neg__(self) -> "MPoly":
        return MPoly({k: -v for k, v in self.terms.items()})

    def __sub__(self, other: "MPoly") -> "MPoly":
        return self + (-other)

    def __mul__(self, other: "MPoly") -> "MPoly":
        out: dict = {}
        for k1, v1 in self.terms.items():
            for k2, v2 in other.terms.items():
                exps = dict(k1)
                for n, e in k2:
                    exps[n] = exps.get(n, 0) + e
                key = tuple(sorted(exps.items()))
                out[key] = out.get(key, Fraction(0)) + v1 * v2
        return MPoly(out)

    def __pow__(self, n: int) -> "MPoly":
        out = MPoly.const(1)
        for _ in range(n):
            out = out * self
        return out

    def __eq__(self, other) -> bool:
        return isinstance(other, MPoly) and self.terms == other.terms

    def __hash__(self):
        return hash(frozenset(self.terms.items()))

    def variables(self) -> set[str]:
        return {n for k in self.terms for n, _ in k}

    def substitute(self, values: dict) -> "MPoly":
        out: dict = {}
        for key, v in self.terms.items():
            keep = []
            for n, e in key:
                if n in values:
                    v = v * to_fraction(values[n]) ** e
                else:
                    keep.append((n, e))
            k = tuple(keep)
            out[k] = out.get(k, Fraction(0)) + v
        return MPoly(out)

    def degree_in(self, name: str) -> int:
        return max([dict(k).get(name, 0) for k in self.terms] or [0])

    def constant_value(self) -> Fraction:
        extra = self.variables()
        if extra:
            raise ExpressionError(f"expression still depends on {sorted(extra)}")
        return self.terms.get((), Fraction(0))

    def __repr__(self) -> str:
        return format_mpoly(self)


def parse_expr(text: str, allowed: Iterable[str] = ("s", "th")) -> MPoly:
    """Parse one polynomial expression over the given variable names."""
    allowed = set(allowed)
    tokens: list[tuple[str, str, int]] = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            break
        if m.group(0).strip() == "":
            break
        start = m.start(m.lastindex)
        if m.group(1) is not None:
            tokens.append(("num", m.group(1), start))
        elif m.group(2) is not None:
            tokens.append(("name", m.group(2), start))
        else:
            tokens.append(("op", m.group(3), start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    i = 0

    def peek():
        return tokens[i]

    def take():
        nonlocal i
        t = tokens[i]
        i += 1
        return t

    def fail(msg, tok):
        raise ExpressionError(msg, text, tok[2])

    def expr():
        node = term()
        while peek()[0] == "op" and peek()[1] in "+-":
            op = take()[1]
            rhs = term()
            node = node + rhs if op == "+" else node - rhs
        return node

    def term():
        node = unary()
        while peek()[0] == "op" and peek()[1] == "*":
            take()
            node = node * unary()
        return node

    def unary():
        if peek()[0] == "op" and peek()[1] in "+-":
            op = take()[1]
            node = unary()
            return -node if op == "-" else node
        return power()

    def power():
        node = atom()
        if peek()[0] == "op" and peek()[1] == "^":
            take()
            tok = take()
            if tok[0] != "num" or not tok[1].isdigit():
                fail("exponent must be a nonnegative integer", tok)
            node = node ** int(tok[1])
        return node

    def atom():
        tok = take()
        if tok[0] == "num":
            value = Fraction(tok[1])
            if peek()[0] == "op" and peek()[1] == "/":
                take()
                den = take()
                if den[0] != "num" or not den[1].isdigit() or not tok[1].isdigit():
                    fail("'/' only allowed between integer literals", den)
                if int(den[1]) == 0:
                    fail("division by zero", den)
                value = Fraction(int(tok[1]), int(den[1]))
            return MPoly.const(value)
        if tok[0] == "name":
            if tok[1] not in allowed:
                raise UnknownNameError(tok[1], text, tok[2])
            return MPoly.var(tok[1])
        if tok[0] == "op" and tok[1] == "(":
            node = expr()
            close = take()
            if close[1] != ")":
                fail("expected ')'", close)
            return node
        fail(f"unexpected token {tok[1]!r}" if tok[1] else "unexpected end of expression", tok)

    result = expr()
    if peek()[0] != "end":
        fail(f"unexpected token {peek()[1]!r}", peek())
    return result


class UnknownNameError(ExpressionError):
    def __init__(self, name: str, text: str = "", pos: int = 0):
        self.name = name
        super().__init__(f"unknown name {name!r}", text, pos)


def _fmt_fraction(c: Fraction) -> str:
    return str(c.numerator) if c.denominator == 1 else f"{c.numerator}/{c.denominator}"


def format_mpoly(p: MPoly, order: Sequence[str] = ("s", "th")) -> str:
    """Canonical text form, parseable by :func:`parse_expr`."""
    if not p.terms:
        return "0"
    rank = {n: i for i, n in enumerate(order)}

    def sort_key(item):
        key = item[0]
        return (sum(e for _, e in key), [(rank.get(n, len(rank)), n, e) for n, e in key])

    parts = []
    for key, c in sorted(p.terms.items(), key=sort_key):
        factors = [n if e == 1 else f"{n}^{e}" for n, e in sorted(key, key=lambda t: (rank.get(t[0], len(rank)), t[0]))]
        mag = abs(c)
        if factors:
            body = "*".join(factors) if mag == 1 else _fmt_fraction(mag) + "*" + "*".join(factors)
        else:
            body = _fmt_fraction(mag)
        if not parts:
            parts.append(("-" if c < 0 else "") + body)
        else:
            parts.append(("- " if c < 0 else "+ ") + body)
    return " ".join(parts)


def entry_to_mpoly(p, i: int, j: int) -> MPoly:
    """Entry (i, j) of a PolyMat1/PolyMat2 as an MPoly (float coefficients made exact)."""
    terms = {}
    c = p.coeffs
    if isinstance(p, PolyMat1):
        for k in range(c.shape[2]):
            if c[i, j, k] != 0:
                terms[(("s", k),) if k else ()] = to_fraction(c[i, j, k])
    else:
        for k in range(c.shape[2]):
            for l in range(c.shape[3]):
                if c[i, j, k, l] != 0:
                    key = tuple(x for x in (("s", k), ("th", l)) if x[1])
                    terms[key] = to_fraction(c[i, j, k, l])
    return MPoly(terms)


def mpoly_to_coeffs(p: MPoly) -> dict:
    """``{(deg_s, deg_th): Fraction}``; raises if other names remain."""
    out = {}
    for key, v in p.terms.items():
        d = dict(key)
        extra = set(d) - {"s", "th"}
        if extra:
            raise ExpressionError(f"expression still depends on {sorted(extra)}")
        out[(d.get("s", 0), d.get("th", 0))] = v
    return out


def matrix_from_mpolys(entries: Sequence[Sequence[MPoly]], bivariate: bool):
    """Build a PolyMat1 (s only) or PolyMat2 from a grid of MPoly entries."""
    rows, cols = len(entries), len(entries[0]) if entries else 0
    terms = {}
    for i, row in enumerate(entries):
        for j, e in enumerate(row):
            t = mpoly_to_coeffs(e)
            if not bivariate and any(k[1] for k in t):
                raise ExpressionError("entry depends on th where only s is allowed")
            terms[(i, j)] = t
    P = PolyMat2.from_dict(rows, cols, terms)
    return P if bivariate else P.only_s()


def format_matrix(p) -> str:
    """Bracketed row-major text with quoted entries."""
    rows = []
    for i in range(p.shape[0]):
        cells = [f'"{format_mpoly(entry_to_mpoly(p, i, j))}"' for j in range(p.shape[1])]
        rows.append("[" + ", ".join(cells) + "]")
    return "[" + ", ".join(rows) + "]"


def parse_poly1(text: str) -> PolyMat1:
    """Parse a single univariate polynomial into a 1x1 PolyMat1."""
    return matrix_from_mpolys([[parse_expr(text, ("s",))]], bivariate=False)


def parse_poly2(text: str) -> PolyMat2:
    return matrix_from_mpolys([[parse_expr(text, ("s", "th"))]], bivariate=True)
