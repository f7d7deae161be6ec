"""Three-part partial integral (3-PI) operators on ``L2[a, b]``.

An operator ``P = {R0, R1, R2}`` acts as::

    (P v)(s) = R0(s) v(s) + ∫_a^s R1(s, th) v(th) dth + ∫_s^b R2(s, th) v(th) dth

With polynomial parameters the set is closed under sums, products and
adjoints, and every result is computed exactly.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .polyalg import (
    DimensionError,
    ExpressionError,
    PolyMat1,
    PolyMat2,
    Scalar,
    block1,
    block2,
    format_matrix,
    int_dtheta,
    int_product,
    integrate,
    matrix_from_mpolys,
    parse_expr,
    to_fraction,
)


@dataclass(frozen=True, eq=False)
class PiOperator:
    R0: PolyMat1
    R1: PolyMat2
    R2: PolyMat2
    a: Fraction = Fraction(0)
    b: Fraction = Fraction(1)

    def __post_init__(self):
        if not (self.R0.shape == self.R1.shape == self.R2.shape):
            raise DimensionError(
                f"parameter blocks disagree: {self.R0.shape}, {self.R1.shape}, {self.R2.shape}"
            )
        a, b = to_fraction(self.a), to_fraction(self.b)
        if not a < b:
            raise ValueError(f"empty domain [{a}, {b}]")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    # construction ---------------------------------------------------------
    @classmethod
    def zero(cls, p: int, q: int, a=0, b=1, exact: bool = True) -> "PiOperator":
        return cls(PolyMat1.zeros(p, q, exact), PolyMat2.zeros(p, q, exact), PolyMat2.zeros(p, q, exact), a, b)

    @classmethod
    def identity(cls, n: int, a=0, b=1, exact: bool = True) -> "PiOperator":
        return cls.multiplier(PolyMat1.identity(n, exact), a, b)

    @classmethod
    def multiplier(cls, R0: PolyMat1, a=0, b=1) -> "PiOperator":
        p, q = R0.shape
        return cls(R0, PolyMat2.zeros(p, q, R0.exact), PolyMat2.zeros(p, q, R0.exact), a, b)

    @property
    def shape(self) -> tuple[int, int]:
        return self.R0.shape

    @property
    def exact(self) -> bool:
        return self.R0.exact and self.R1.exact and self.R2.exact

    def to_float(self) -> "PiOperator":
        return PiOperator(self.R0.to_float(), self.R1.to_float(), self.R2.to_float(), self.a, self.b)

    def to_exact(self) -> "PiOperator":
        return PiOperator(self.R0.to_exact(), self.R1.to_exact(), self.R2.to_exact(), self.a, self.b)

    def __eq__(self, other) -> bool:
        if not isinstance(other, PiOperator):
            return NotImplemented
        return (
            self.a == other.a
            and self.b == other.b
            and self.R0 == other.R0
            and self.R1 == other.R1
            and self.R2 == other.R2
        )

    def __getitem__(self, key) -> "PiOperator":
        return PiOperator(self.R0[key], self.R1[key], self.R2[key], self.a, self.b)

    def _check_domain(self, other: "PiOperator"):
        if (self.a, self.b) != (other.a, other.b):
            raise DimensionError("operators live on different domains")

    # linear structure -----------------------------------------------------
    def __add__(self, other: "PiOperator") -> "PiOperator":
        self._check_domain(other)
        if self.shape != other.shape:
            raise DimensionError(f"cannot add {self.shape} and {other.shape}")
        return PiOperator(self.R0 + other.R0, self.R1 + other.R1, self.R2 + other.R2, self.a, self.b)

    def __neg__(self) -> "PiOperator":
        return PiOperator(-self.R0, -self.R1, -self.R2, self.a, self.b)

    def __sub__(self, other: "PiOperator") -> "PiOperator":
        return self + (-other)

    def scale(self, c: Scalar) -> "PiOperator":
        return PiOperator(self.R0.scale(c), self.R1.scale(c), self.R2.scale(c), self.a, self.b)

    def __matmul__(self, other: "PiOperator") -> "PiOperator":
        return compose(self, other)

    @property
    def H(self) -> "PiOperator":
        return adjoint(self)

    def apply(self, v: PolyMat1) -> PolyMat1:
        return apply_poly(self, v)


def add(P: PiOperator, Q: PiOperator) -> PiOperator:
    return P + Q


def scale(P: PiOperator, c: Scalar) -> PiOperator:
    return P.scale(c)


def apply_poly(P: PiOperator, v: PolyMat1) -> PolyMat1:
    """Exact image of a polynomial column under ``P``."""
    if P.shape[1] != v.shape[0]:
        raise DimensionError(f"operator is {P.shape}, argument has {v.shape[0]} rows")
    vt = v.as_th()
    lower = int_dtheta(P.R1 @ vt, P.a, "s")
    upper = int_dtheta(P.R2 @ vt, "s", P.b)
    return P.R0 @ v + lower + upper


def _products(P: PiOperator, Q: PiOperator, keep_inner: bool):
    """Blocks of ``P ∘ Q``; Fubini splitting of the double integrals.

    With ``keep_inner`` the inner index is not summed and raw arrays of shape
    ``(p, k, q, ...)`` come back.
    """
    a, b = P.a, P.b
    P0s, P0t = P.R0.as_s(), P.R0.as_th()
    Q0s, Q0t = Q.R0.as_s(), Q.R0.as_th()

    def pointwise(X: PolyMat2, Y: PolyMat2):
        if not keep_inner:
            return X @ Y
        exact = X.exact and Y.exact
        x = X.coeffs if exact else X.coeffs.astype(float)
        y = Y.coeffs if exact else Y.coeffs.astype(float)
        return _outer_pointwise(x, y, exact)

    def total(*terms):
        if not keep_inner:
            out = terms[0]
            for t in terms[1:]:
                out = out + t
            return out
        return _sum_arrays(terms)

    R0 = pointwise(P0s, Q0s)
    R1 = total(
        pointwise(P0s, Q.R1),
        pointwise(P.R1, Q0t),
        int_product(P.R1, Q.R2, a, "th", keep_inner),
        int_product(P.R1, Q.R1, "th", "s", keep_inner),
        int_product(P.R2, Q.R1, "s", b, keep_inner),
    )
    R2 = total(
        pointwise(P0s, Q.R2),
        pointwise(P.R2, Q0t),
        int_product(P.R1, Q.R2, a, "s", keep_inner),
        int_product(P.R2, Q.R2, "s", "th", keep_inner),
        int_product(P.R2, Q.R1, "th", b, keep_inner),
    )
    return R0, R1, R2


def _outer_pointwise(x: np.ndarray, y: np.ndarray, exact: bool) -> np.ndarray:
    from .polyalg import _zeros

    p, k, dsx, dtx = x.shape
    q, dsy, dty = y.shape[1], y.shape[2], y.shape[3]
    out = _zeros((p, k, q, dsx + dsy - 1, dtx + dty - 1), exact)
    for i in range(dsy):
        for j in range(dty):
            yij = y[:, :, i, j]
            if exact and not np.any(yij != 0):
                continue
            out[:, :, :, i : i + dsx, j : j + dtx] += np.einsum("pkab,kq->pkqab", x, yij)
    return out


def _sum_arrays(arrays) -> np.ndarray:
    from .polyalg import _add_arrays

    out = arrays[0]
    for arr in arrays[1:]:
        out = _add_arrays(out, arr)
    return out


def compose(P: PiOperator, Q: PiOperator) -> PiOperator:
    """``S`` with ``S v = P(Q v)`` for every ``v``."""
    P._check_domain(Q)
    if P.shape[1] != Q.shape[0]:
        raise DimensionError(f"cannot compose {P.shape} with {Q.shape}")
    R0, R1, R2 = _products(P, Q, keep_inner=False)
    return PiOperator(R0.only_s(), R1, R2, P.a, P.b)


def compose_unsummed(P: PiOperator, Q: PiOperator):
    """Per-inner-index pieces of ``P ∘ Q``.

    Returns three arrays with shapes ``(p, k, q, Ds)``, ``(p, k, q, Ds, Dth)``
    and ``(p, k, q, Ds, Dth)``: summing over axis 1 gives the blocks of
    ``compose(P, Q)``.  Used to carry a matrix of decision variables
    sandwiched between two operators.
    """
    P._check_domain(Q)
    if P.shape[1] != Q.shape[0]:
        raise DimensionError(f"cannot compose {P.shape} with {Q.shape}")
    R0, R1, R2 = _products(P, Q, keep_inner=True)
    return R0[..., 0], R1, R2


def adjoint(P: PiOperator) -> PiOperator:
    """Adjoint with respect to the L2 inner product."""
    return PiOperator(P.R0.T, P.R2.swap().T, P.R1.swap().T, P.a, P.b)


def inner(u: PolyMat1, v: PolyMat1, a: Scalar, b: Scalar):
    """``<u, v>`` in L2[a, b] for polynomial columns."""
    if u.shape != v.shape:
        raise DimensionError(f"cannot pair {u.shape} with {v.shape}")
    return (u.T @ v).integrate(to_fraction(a), to_fraction(b))[0, 0]


def as_quadratic_form(P: PiOperator, u: PolyMat1, v: PolyMat1):
    """``<u, P v>`` in L2, exact for exact inputs."""
    return inner(u, apply_poly(P, v), P.a, P.b)


def block_operator(blocks) -> PiOperator:
    """Assemble a block PI operator from a nested list of PiOperator values."""
    first = blocks[0][0]
    return PiOperator(
        block1([[B.R0 for B in row] for row in blocks]),
        block2([[B.R1 for B in row] for row in blocks]),
        block2([[B.R2 for B in row] for row in blocks]),
        first.a,
        first.b,
    )


# ---------------------------------------------------------------------------
# text serialization

_HEADER = "# pi-operator v1"
_LINE = re.compile(r"^\s*(\w+)\s*=\s*(.*?)\s*$")


def _fmt_scalar(x: Fraction) -> str:
    return str(x.numerator) if x.denominator == 1 else f"{x.numerator}/{x.denominator}"


def format_operator(P: PiOperator, name: str | None = None) -> str:
    """Human-readable block that :func:`parse_operator` reads back exactly."""
    P = P.to_exact()
    lines = [_HEADER if name is None else f"{_HEADER} {name}"]
    lines.append(f"domain = {_fmt_scalar(P.a)}, {_fmt_scalar(P.b)}")
    lines.append(f"dims = {P.shape[0]}, {P.shape[1]}")
    lines.append(f"R0 = {format_matrix(P.R0)}")
    lines.append(f"R1 = {format_matrix(P.R1)}")
    lines.append(f"R2 = {format_matrix(P.R2)}")
    return "\n".join(lines) + "\n"


def parse_matrix_text(text: str, allowed=("s", "th")):
    """Parse ``[[e, e], [e, e]]`` with bare or double-quoted entries.

    Returns a list of rows of :class:`MPoly`.
    """
    s = text.strip()
    if not (s.startswith("[") and s.endswith("]")):
        raise ExpressionError("matrix must be written as [[...], ...]")
    inner = s[1:-1].strip()
    rows = []
    pos = 0
    while pos < len(inner):
        while pos < len(inner) and inner[pos] in " ,\t":
            pos += 1
        if pos >= len(inner):
            break
        if inner[pos] != "[":
            raise ExpressionError("expected '[' to start a row", inner, pos)
        depth, j, quoted = 0, pos, False
        while j < len(inner):
            ch = inner[j]
            if ch == '"':
                quoted = not quoted
            elif not quoted and ch in "[(":
                depth += 1
            elif not quoted and ch in "])":
                depth -= 1
                if depth == 0 and ch == "]":
                    break
            j += 1
        if j >= len(inner):
            raise ExpressionError("unterminated row", inner, pos)
        rows.append(_split_cells(inner[pos + 1 : j]))
        pos = j + 1
    if not rows:
        raise ExpressionError("empty matrix")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ExpressionError("rows have different lengths")
    return [[parse_expr(cell, allowed) for cell in row] for row in rows]


def _split_cells(row: str) -> list[str]:
    cells, depth, quoted, cur = [], 0, False, []
    for ch in row:
        if ch == '"':
            quoted = not quoted
            continue
        if not quoted and ch == "(":
            depth += 1
        elif not quoted and ch == ")":
            depth -= 1
        if ch == "," and depth == 0 and not quoted:
            cells.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    tail = "".join(cur).strip()
    if tail or cells:
        cells.append(tail)
    if any(c == "" for c in cells):
        raise ExpressionError("empty matrix entry")
    return cells


def parse_operator(text: str) -> PiOperator:
    fields = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        m = _LINE.match(line)
        if m is None:
            raise ExpressionError(f"cannot parse line {raw!r}")
        fields[m.group(1)] = m.group(2)
    try:
        a, b = (Fraction(x.strip()) for x in fields["domain"].split(","))
        p, q = (int(x) for x in fields["dims"].split(","))
    except KeyError as exc:
        raise ExpressionError(f"missing field {exc.args[0]!r}") from None
    R0 = matrix_from_mpolys(parse_matrix_text(fields["R0"], ("s",)), bivariate=False)
    R1 = matrix_from_mpolys(parse_matrix_text(fields["R1"]), bivariate=True)
    R2 = matrix_from_mpolys(parse_matrix_text(fields["R2"]), bivariate=True)
    P = PiOperator(R0, R1, R2, a, b)
    if P.shape != (p, q):
        raise DimensionError(f"declared dims {(p, q)} but blocks are {P.shape}")
    return P
