"""Linear 1-D PDE models with integral terms, and the PDESPEC text format.

A model partitions its states by differentiability, ``x = col(x0, x1, x2)``
with ``x_i`` having ``i`` spatial derivatives, and is written in terms of::

    x_c = col(x1, x2, ∂x2)                      (n_S rows)
    x_b = col(x_c(a), x_c(b))                   (2 n_S rows)
    x_D = col(x0, x1, x2, ∂x1, ∂x2, ∂²x2)       (n_x + n_S rows)

    ẋ(s) = A0(s) x_D(s) + ∫_a^s A1(s,th) x_D(th) dth + ∫_s^b A2(s,th) x_D(th) dth
    B x_b = ∫_a^b BI(s) x_D(s) ds
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .polyalg import (
    DimensionError,
    ExpressionError,
    MPoly,
    PolyMat1,
    PolyMat2,
    UnknownNameError,
    block1,
    format_mpoly,
    matrix_from_mpolys,
    to_fraction,
)
from .pi_ops import parse_matrix_text


class PdeSpecError(ValueError):
    """Problem in a PDESPEC document, located by line and column."""

    def __init__(self, message: str, line: int = 0, column: int = 0):
        self.line, self.column = line, column
        where = f"line {line}, column {column}: " if line else ""
        super().__init__(where + message)


class UnknownParameterError(PdeSpecError):
    pass


class UnboundParameterError(ValueError):
    pass


@dataclass(frozen=True)
class StatePartition:
    n0: int
    n1: int
    n2: int

    def __post_init__(self):
        if min(self.n0, self.n1, self.n2) < 0:
            raise ValueError("state counts must be nonnegative")
        if self.nx < 1:
            raise ValueError("at least one state is required")

    @property
    def nx(self) -> int:
        return self.n0 + self.n1 + self.n2

    @property
    def nS(self) -> int:
        return self.n1 + 2 * self.n2

    @property
    def nD(self) -> int:
        return self.nx + self.nS

    # row offsets of each component inside x_D
    def slots(self) -> dict[str, slice]:
        n0, n1, n2, nx = self.n0, self.n1, self.n2, self.nx
        return {
            "x0": slice(0, n0),
            "x1": slice(n0, n0 + n1),
            "x2": slice(n0 + n1, nx),
            "dx1": slice(nx, nx + n1),
            "dx2": slice(nx + n1, nx + n1 + n2),
            "ddx2": slice(nx + n1 + n2, nx + n1 + 2 * n2),
        }


def _mat_shape(m: Sequence[Sequence[MPoly]]) -> tuple[int, int]:
    return len(m), (len(m[0]) if m else 0)


def _zero_grid(rows: int, cols: int):
    return tuple(tuple(MPoly() for _ in range(cols)) for _ in range(rows))


def _freeze(m) -> tuple:
    return tuple(tuple(row) for row in m)


@dataclass(frozen=True)
class PdeSystem:
    """A model whose matrix entries may still mention named parameters."""

    partition: StatePartition
    a: Fraction
    b: Fraction
    A0_expr: tuple
    A1_expr: tuple
    A2_expr: tuple
    B_expr: tuple
    BI_expr: tuple
    params: tuple[str, ...] = ()
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "a", to_fraction(self.a))
        object.__setattr__(self, "b", to_fraction(self.b))
        if not self.a < self.b:
            raise ValueError(f"empty domain [{self.a}, {self.b}]")
        n = self.partition
        for label, m, cols in (
            ("A0", self.A0_expr, n.nD),
            ("A1", self.A1_expr, n.nD),
            ("A2", self.A2_expr, n.nD),
        ):
            if _mat_shape(m) != (n.nx, cols):
                raise DimensionError(f"{label} must be {n.nx}x{cols}, got {_mat_shape(m)[0]}x{_mat_shape(m)[1]}")
        nbc = len(self.B_expr)
        if _mat_shape(self.B_expr)[1] != 2 * n.nS and nbc:
            raise DimensionError(f"B must have 2*n_S = {2 * n.nS} columns, got {_mat_shape(self.B_expr)[1]}")
        if _mat_shape(self.BI_expr) != (nbc, n.nD) and nbc:
            raise DimensionError(f"BI must be {nbc}x{n.nD}, got {_mat_shape(self.BI_expr)[0]}x{_mat_shape(self.BI_expr)[1]}")
        for label, m in (("B", self.B_expr),):
            for row in m:
                for e in row:
                    if e.variables() & {"s", "th"}:
                        raise DimensionError(f"{label} entries must be constants")
        for label, m in (("A0", self.A0_expr), ("BI", self.BI_expr)):
            for row in m:
                for e in row:
                    if "th" in e.variables():
                        raise DimensionError(f"{label} entries may not depend on th")
        known = set(self.params) | {"s", "th"}
        for m in (self.A0_expr, self.A1_expr, self.A2_expr, self.B_expr, self.BI_expr):
            for row in m:
                for e in row:
                    extra = e.variables() - known
                    if extra:
                        raise UnknownParameterError(f"unknown parameter {sorted(extra)[0]!r}")

    # shape bookkeeping --------------------------------------------------
    @property
    def n_bc(self) -> int:
        return len(self.B_expr)

    @property
    def free_params(self) -> tuple[str, ...]:
        used = set()
        for m in (self.A0_expr, self.A1_expr, self.A2_expr, self.B_expr, self.BI_expr):
            for row in m:
                for e in row:
                    used |= e.variables()
        return tuple(p for p in self.params if p in used)

    def _require_bound(self):
        if self.free_params:
            raise UnboundParameterError(f"unbound parameters: {', '.join(self.free_params)}")

    # numeric views --------------------------------------------------------
    @property
    def A0(self) -> PolyMat1:
        self._require_bound()
        return matrix_from_mpolys(self.A0_expr, bivariate=False)

    @property
    def A1(self) -> PolyMat2:
        self._require_bound()
        return matrix_from_mpolys(self.A1_expr, bivariate=True)

    @property
    def A2(self) -> PolyMat2:
        self._require_bound()
        return matrix_from_mpolys(self.A2_expr, bivariate=True)

    @property
    def B(self) -> np.ndarray:
        self._require_bound()
        out = np.empty((self.n_bc, 2 * self.partition.nS), dtype=object)
        for i, row in enumerate(self.B_expr):
            for j, e in enumerate(row):
                out[i, j] = e.constant_value()
        return out

    @property
    def BI(self) -> PolyMat1:
        self._require_bound()
        if self.n_bc == 0:
            return PolyMat1.zeros(0, self.partition.nD)
        return matrix_from_mpolys(self.BI_expr, bivariate=False)


def bind_params(sys: PdeSystem, assignments: Mapping[str, object]) -> PdeSystem:
    """Substitute rational values for every named parameter."""
    unknown = set(assignments) - set(sys.params)
    if unknown:
        raise UnknownParameterError(f"unknown parameter {sorted(unknown)[0]!r}")
    missing = [p for p in sys.params if p not in assignments]
    if missing:
        raise UnboundParameterError(f"no value for parameter(s): {', '.join(missing)}")
    values = {k: to_fraction(v) for k, v in assignments.items()}

    def sub(m):
        return tuple(tuple(e.substitute(values) for e in row) for row in m)

    return replace(
        sys,
        A0_expr=sub(sys.A0_expr),
        A1_expr=sub(sys.A1_expr),
        A2_expr=sub(sys.A2_expr),
        B_expr=sub(sys.B_expr),
        BI_expr=sub(sys.BI_expr),
        params=(),
    )


# ---------------------------------------------------------------------------
# state vectors


def state_derivatives(n: StatePartition, x: PolyMat1) -> PolyMat1:
    """``x_D`` for a polynomial state column ``x``."""
    if x.shape != (n.nx, 1):
        raise DimensionError(f"state must be {n.nx}x1, got {x.shape}")
    x0 = x[0 : n.n0, :]
    x1 = x[n.n0 : n.n0 + n.n1, :]
    x2 = x[n.n0 + n.n1 : n.nx, :]
    return block1([[x0], [x1], [x2], [x1.derivative()], [x2.derivative()], [x2.derivative(2)]])


def continuous_part(n: StatePartition, x: PolyMat1) -> PolyMat1:
    """``x_c = col(x1, x2, ∂x2)``."""
    x1 = x[n.n0 : n.n0 + n.n1, :]
    x2 = x[n.n0 + n.n1 : n.nx, :]
    return block1([[x1], [x2], [x2.derivative()]])


def boundary_values(n: StatePartition, x: PolyMat1, a, b) -> np.ndarray:
    xc = continuous_part(n, x)
    return np.concatenate([xc(to_fraction(a)), xc(to_fraction(b))], axis=0)


def boundary_defect(sys: PdeSystem, x: PolyMat1) -> np.ndarray:
    """``B x_b - ∫ BI x_D`` as an exact column."""
    n = sys.partition
    xb = boundary_values(n, x, sys.a, sys.b)
    xD = state_derivatives(n, x)
    if sys.n_bc == 0:
        return np.zeros((0, 1), dtype=object)
    integral = (sys.BI @ xD).integrate(sys.a, sys.b)
    return sys.B.dot(xb) - integral


def membership_residual(sys: PdeSystem, x: PolyMat1) -> float:
    """Euclidean norm of the boundary-condition defect; zero iff ``x`` is in the domain."""
    d = boundary_defect(sys, x)
    total = sum((v * v for v in d.reshape(-1)), Fraction(0))
    return math.sqrt(total)


# ---------------------------------------------------------------------------
# PDESPEC v1


_SECTION = re.compile(r"^\[(\w+)\]$")
_ASSIGN = re.compile(r"(\w+)\s*=\s*([^\s,]+)")
_MATRIX_LINE = re.compile(r"^(\w+)\s*=\s*(.*)$")
_SECTIONS = ("domain", "states", "params", "dynamics", "bc")


def _strip_comment(line: str) -> str:
    quoted = False
    for i, ch in enumerate(line):
        if ch == '"':
            quoted = not quoted
        elif ch == "#" and not quoted:
            return line[:i]
    return line


def _balanced(text: str) -> bool:
    depth, quoted = 0, False
    for ch in text:
        if ch == '"':
            quoted = not quoted
        elif not quoted and ch == "[":
            depth += 1
        elif not quoted and ch == "]":
            depth -= 1
    return depth <= 0


def parse_pde(text: str, name: str = "") -> PdeSystem:
    """Parse and validate a PDESPEC document."""
    section = None
    scalars: dict[str, dict[str, tuple[str, int, int]]] = {"domain": {}, "states": {}}
    params: list[str] = []
    matrices: dict[str, tuple[str, int, int]] = {}
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        lineno = i + 1
        raw = _strip_comment(lines[i])
        line = raw.strip()
        i += 1
        if not line:
            continue
        col = raw.index(line[0]) + 1
        m = _SECTION.match(line)
        if m:
            section = m.group(1)
            if section not in _SECTIONS:
                raise PdeSpecError(f"unknown section [{section}]", lineno, col)
            continue
        if section is None:
            raise PdeSpecError("content before the first section header", lineno, col)
        if section in ("domain", "states"):
            found = list(_ASSIGN.finditer(line))
            if not found or re.sub(r"[\s,]", "", _ASSIGN.sub("", line)):
                raise PdeSpecError("expected key=value pairs", lineno, col)
            for f in found:
                scalars[section][f.group(1)] = (f.group(2), lineno, col + f.start())
        elif section == "params":
            for tok in re.split(r"[\s,]+", line):
                if not tok:
                    continue
                if not re.fullmatch(r"[A-Za-z_]\w*", tok) or tok in ("s", "th"):
                    raise PdeSpecError(f"invalid parameter name {tok!r}", lineno, col)
                params.append(tok)
        else:
            m = _MATRIX_LINE.match(line)
            if not m:
                raise PdeSpecError("expected NAME = [[...]]", lineno, col)
            key, value = m.group(1), m.group(2)
            allowed_keys = ("A0", "A1", "A2") if section == "dynamics" else ("B", "BI")
            if key not in allowed_keys:
                raise PdeSpecError(f"unknown block {key!r} in [{section}]", lineno, col)
            while not _balanced(value) and i < len(lines):
                value += " " + _strip_comment(lines[i]).strip()
                i += 1
            matrices[key] = (value, lineno, col + m.start(2))

    def scalar(sec, key, default=None, kind=Fraction):
        if key not in scalars[sec]:
            if default is None:
                raise PdeSpecError(f"missing {key} in [{sec}]")
            return kind(default)
        value, ln, c = scalars[sec][key]
        try:
            return kind(value)
        except (ValueError, ZeroDivisionError):
            raise PdeSpecError(f"bad value {value!r} for {key}", ln, c) from None

    for sec, keys in (("domain", {"a", "b"}), ("states", {"n0", "n1", "n2"})):
        extra = set(scalars[sec]) - keys
        if extra:
            _, ln, c = scalars[sec][sorted(extra)[0]]
            raise PdeSpecError(f"unknown key {sorted(extra)[0]!r} in [{sec}]", ln, c)
    a = scalar("domain", "a", 0)
    b = scalar("domain", "b", 1)
    n = StatePartition(scalar("states", "n0", 0, int), scalar("states", "n1", 0, int), scalar("states", "n2", 0, int))

    allowed = set(params)

    def read(key, allowed_vars):
        value, ln, c = matrices[key]
        try:
            return _freeze(parse_matrix_text(value, allowed | set(allowed_vars)))
        except UnknownNameError as exc:
            raise UnknownParameterError(f"unknown parameter {exc.name!r} in {key}", ln, c + exc.pos) from None
        except ExpressionError as exc:
            raise PdeSpecError(f"{key}: {exc}", ln, c + exc.pos) from None

    blocks = {}
    for key, vars_ in (("A0", ("s",)), ("A1", ("s", "th")), ("A2", ("s", "th")), ("B", ()), ("BI", ("s",))):
        if key in matrices:
            blocks[key] = read(key, vars_)
    nbc = len(blocks["B"]) if "B" in blocks else (len(blocks["BI"]) if "BI" in blocks else n.nS)
    blocks.setdefault("A0", _zero_grid(n.nx, n.nD))
    blocks.setdefault("A1", _zero_grid(n.nx, n.nD))
    blocks.setdefault("A2", _zero_grid(n.nx, n.nD))
    blocks.setdefault("B", _zero_grid(nbc, 2 * n.nS))
    blocks.setdefault("BI", _zero_grid(nbc, n.nD))
    try:
        return PdeSystem(
            n, a, b, blocks["A0"], blocks["A1"], blocks["A2"], blocks["B"], blocks["BI"],
            tuple(params), name,
        )
    except DimensionError as exc:
        key = str(exc).split()[0]
        ln, c = (matrices[key][1], matrices[key][2]) if key in matrices else (0, 0)
        raise PdeSpecError(str(exc), ln, c) from None


def _fmt_fraction(x: Fraction) -> str:
    return str(x.numerator) if x.denominator == 1 else f"{x.numerator}/{x.denominator}"


def _fmt_grid(m) -> str:
    order = ("s", "th")
    rows = ["[" + ", ".join(f'"{format_mpoly(e, order)}"' for e in row) + "]" for row in m]
    return "[" + ", ".join(rows) + "]"


def serialize_pde(sys: PdeSystem) -> str:
    n = sys.partition
    out = []
    if sys.name:
        out.append(f"# {sys.name}")
    out += ["[domain]", f"a = {_fmt_fraction(sys.a)}", f"b = {_fmt_fraction(sys.b)}"]
    out += ["[states]", f"n0 = {n.n0}", f"n1 = {n.n1}", f"n2 = {n.n2}"]
    if sys.params:
        out += ["[params]", ", ".join(sys.params)]
    out += ["[dynamics]"]
    out += [f"A0 = {_fmt_grid(sys.A0_expr)}", f"A1 = {_fmt_grid(sys.A1_expr)}", f"A2 = {_fmt_grid(sys.A2_expr)}"]
    if sys.n_bc:
        out += ["[bc]", f"B = {_fmt_grid(sys.B_expr)}", f"BI = {_fmt_grid(sys.BI_expr)}"]
    return "\n".join(out) + "\n"


def load_pde(path) -> PdeSystem:
    from pathlib import Path

    p = Path(path)
    return parse_pde(p.read_text(encoding="utf-8"), name=p.stem)
