import zlib
from fractions import Fraction

import numpy as np
import pytest

from pielab.conversion import (
    InadmissibleError,
    NotInDomainError,
    apply_D,
    build_A,
    build_A_appendix,
    build_T,
    compute_BQ,
    compute_BT,
    convert,
    core_matrices,
    format_pie,
    h_norm,
    parse_pie,
    project_to_domain,
    round_trip_residual,
    x_inner,
    x_norm,
)
from pielab.pde_model import StatePartition, bind_params, load_pde, membership_residual, parse_pde
from pielab.pi_ops import PiOperator, apply_poly, inner
from pielab.polyalg import PolyMat1, parse_poly1, parse_poly2

from conftest import CORPUS, MODELS, load_model, random_poly1


def scalar_op(R0="0", R1="0", R2="0"):
    return PiOperator(parse_poly1(R0), parse_poly2(R1), parse_poly2(R2))


# -- core matrices -----------------------------------------------------------


def test_core_second_order_state():
    cm = core_matrices(StatePartition(0, 0, 1))
    assert cm.T == PolyMat1.from_lists([[[1], [0, 1]], [[0], [1]]])
    assert cm.Q == PolyMat1.from_lists([[[0, 1]], [[1]]])


def test_core_first_order_state():
    cm = core_matrices(StatePartition(0, 1, 0))
    assert cm.T == PolyMat1.constant([[1]])
    assert cm.Q == PolyMat1.constant([[1]])


def test_core_undifferentiated_state():
    cm = core_matrices(StatePartition(1, 0, 0))
    assert cm.T.shape == (0, 0) and cm.Q.shape == (0, 1)
    assert cm.U1.tolist() == [[1]]


def test_core_ftc_reconstruction():
    # x2(s) = x2(0) + s x2'(0) + ∫_0^s (s - th) x2''(th) dth for x2 = s^4 - s
    x = parse_poly1("s^4 - s")
    recon = parse_poly1("-s") + apply_poly(scalar_op(R1="s - th"), x.derivative(2))
    assert recon == x


# -- admissibility --------------------------------------------------------------


def test_dirichlet_heat_BT():
    rep = compute_BT(load_model("heat_dirichlet"))
    assert rep.BT.tolist() == [[1, 0], [1, 1]]
    assert rep.determinant == 1 and rep.admissible
    assert str(rep) == "admissible, det(B_T)=1"


def test_neumann_heat_BT():
    rep = compute_BT(load_pde(MODELS / "heat_neumann.pde"))
    assert rep.BT.tolist() == [[0, 1], [0, 1]]
    assert rep.determinant == 0 and not rep.admissible
    with pytest.raises(InadmissibleError):
        convert(load_pde(MODELS / "heat_neumann.pde"))


def test_mckendrick_BT_includes_renewal_integral():
    # B_T = 1 - ∫_0^1 s(1 - s) ds = 5/6, independent of c
    for c in (0, Fraction(1, 2), 3):
        rep = compute_BT(load_model("mckendrick", c=c))
        assert rep.BT.tolist() == [[Fraction(5, 6)]]
        assert rep.admissible


def test_wrong_number_of_conditions_is_rejected():
    text = (MODELS / "heat_dirichlet.pde").read_text().replace(
        "B = [[1, 0, 0, 0], [0, 0, 1, 0]]", "B = [[1, 0, 0, 0]]"
    )
    sys_ = bind_params(parse_pde(text), {"lam": 0})
    with pytest.raises(InadmissibleError):
        compute_BT(sys_)


@pytest.mark.parametrize("name", ["heat_dirichlet", "mckendrick", "coupled_diffusion"])
def test_admissibility_ignores_dynamics(name):
    base = compute_BT(load_model(name))
    text = (MODELS / f"{name}.pde").read_text()
    sys_ = parse_pde(text, name=name)
    for values in ({k: 7 for k in sys_.params}, {k: Fraction(-3, 11) for k in sys_.params}):
        rep = compute_BT(bind_params(sys_, values) if sys_.params else sys_)
        assert rep.BT.tolist() == base.BT.tolist()
        assert rep.determinant == base.determinant


# -- B_Q, T and A -----------------------------------------------------------------


def test_heat_BQ():
    assert compute_BQ(load_model("heat_dirichlet")) == PolyMat1.from_lists([[[0]], [[-1, 1]]])


def test_mckendrick_kernels():
    # x(0) = (6/5) ∫ (∫_th^1 s(1-s) ds) x_f(th) dth
    g = "1/5 - 3/5*th^2 + 2/5*th^3"
    for c in (0, Fraction(5, 2)):
        sys_ = load_model("mckendrick", c=c)
        assert compute_BQ(sys_) == parse_poly1("1/5 - 3/5*s^2 + 2/5*s^3")
        assert build_T(sys_) == scalar_op(R1=f"1 + {g}", R2=g)


def test_heat_T_is_green_kernel():
    T = build_T(load_model("heat_dirichlet"))
    assert T == scalar_op(R1="th*(s - 1)", R2="-s*(1 - th)")
    assert apply_poly(T, parse_poly1("1")) == parse_poly1("1/2*s*(s - 1)")


def test_heat_A_with_reaction_term():
    for lam in (0, 9, Fraction(-7, 3)):
        A = build_A(load_model("heat_dirichlet", lam=lam))
        assert A == scalar_op(R0="1", R1=f"({lam})*th*(s - 1)", R2=f"-({lam})*s*(1 - th)")
        assert apply_poly(A, parse_poly1("1")) == parse_poly1(f"1 + ({lam})*1/2*s*(s - 1)")


def test_transport_A():
    A = build_A(load_model("transport"))
    assert A == scalar_op(R0="-1")
    assert build_A(load_model("mckendrick", c=0)).R0 == PolyMat1.constant([[-1]])


def test_undifferentiated_state_has_identity_T():
    text = "[states]\nn0 = 1\nn1 = 0\nn2 = 0\n[dynamics]\nA0 = [[-1]]\nA1 = [[s*th]]\n"
    sys_ = parse_pde(text)
    assert build_T(sys_) == PiOperator.identity(1)
    assert compute_BQ(sys_).shape == (0, 1)


@pytest.mark.parametrize("name", sorted(CORPUS))
def test_appendix_formula_agrees_with_composition(name, corpus):
    sys_, pie = corpus[name]
    assert build_A_appendix(sys_) == pie.A


@pytest.mark.parametrize("name", sorted(CORPUS))
def test_T_multiplier_selects_undifferentiated_states(name, corpus):
    sys_, pie = corpus[name]
    n = sys_.partition
    G0 = np.zeros((n.nx, n.nx), dtype=object)
    G0.fill(Fraction(0))
    for i in range(n.n0):
        G0[i, i] = Fraction(1)
    assert pie.T.R0 == PolyMat1.constant(G0)


# -- D and the round trip ------------------------------------------------------------


def test_apply_D_examples():
    assert apply_D(StatePartition(0, 0, 1), parse_poly1("s*(1 - s)")) == PolyMat1.constant([[-2]])
    assert apply_D(StatePartition(0, 1, 0), parse_poly1("s^2")) == parse_poly1("2*s")
    x = PolyMat1.from_lists([[[5]], [[0, 0, 1]]])
    assert apply_D(StatePartition(1, 1, 0), x) == PolyMat1.from_lists([[[5]], [[0, 2]]])


def test_heat_round_trip_examples():
    sys_ = load_model("heat_dirichlet")
    pie = convert(sys_)
    assert round_trip_residual(sys_, pie, parse_poly1("s*(1 - s)")) == 0
    assert round_trip_residual(sys_, pie, parse_poly1("s^2*(1 - s)"), parse_poly1("1")) == 0
    assert apply_D(sys_.partition, apply_poly(pie.T, parse_poly1("1"))) == parse_poly1("1")


def test_round_trip_rejects_states_outside_domain():
    sys_ = load_model("heat_dirichlet")
    with pytest.raises(NotInDomainError):
        round_trip_residual(sys_, convert(sys_), parse_poly1("s"))


@pytest.mark.parametrize("name", sorted(CORPUS))
def test_round_trip_on_random_members(name, corpus):
    sys_, pie = corpus[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    nx = sys_.partition.nx
    for _ in range(20):
        x = project_to_domain(sys_, random_poly1(rng, nx, 1, 4))
        assert membership_residual(sys_, x) == 0
        xhat = random_poly1(rng, nx, 1, 3)
        assert round_trip_residual(sys_, pie, x, xhat) == 0


@pytest.mark.parametrize("name", sorted(CORPUS))
def test_T_is_unitary_onto_X(name, corpus):
    sys_, pie = corpus[name]
    rng = np.random.default_rng(11)
    n = sys_.partition
    for _ in range(5):
        u, v = random_poly1(rng, n.nx, 1, 3), random_poly1(rng, n.nx, 1, 3)
        Tu, Tv = apply_poly(pie.T, u), apply_poly(pie.T, v)
        assert x_inner(n, Tu, Tv, sys_.a, sys_.b) == inner(u, v, sys_.a, sys_.b)


@pytest.mark.parametrize("name", sorted(CORPUS))
def test_X_norm_below_sobolev_norm(name, corpus):
    sys_, pie = corpus[name]
    rng = np.random.default_rng(12)
    n = sys_.partition
    for _ in range(10):
        x = apply_poly(pie.T, random_poly1(rng, n.nx, 1, 3))
        assert x_norm(n, x, sys_.a, sys_.b) <= h_norm(n, x, sys_.a, sys_.b) + 1e-12


# -- text form ---------------------------------------------------------------------------


@pytest.mark.parametrize("name", sorted(CORPUS))
def test_pie_text_round_trip(name, corpus):
    _, pie = corpus[name]
    T, A = parse_pie(format_pie(pie))
    assert T == pie.T and A == pie.A
