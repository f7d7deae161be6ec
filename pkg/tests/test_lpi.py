import copy
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pielab import lpi, oracle
from pielab.conversion import PieSystem, convert
from pielab.pi_ops import PiOperator, apply_poly, as_quadratic_form, inner
from pielab.polyalg import DimensionError, PolyMat1, PolyMat2, parse_poly1

from conftest import load_model, poly_callable, quad_inner, random_poly1


@pytest.fixture(scope="module")
def transport():
    return convert(load_model("transport"))


@pytest.fixture(scope="module")
def transport_cert(transport):
    out, problem = lpi.prove_stability(transport, 1)
    assert isinstance(out, lpi.StabilityCertificate), out
    return out


@pytest.fixture(scope="module")
def heat9_problem():
    return lpi.assemble_lpi(convert(load_model("heat_dirichlet", lam=9)), 2)


# -- positive parameterization -------------------------------------------------------


def test_parameter_sizes():
    p = lpi.PositivePiParam(2, nx=1, basis="theta")
    assert (p.block_size, p.kernel_block_size, p.size) == (3, 3, 9)
    p = lpi.PositivePiParam(2, nx=2, basis="tensor")
    assert (p.block_size, p.kernel_block_size, p.size) == (6, 18, 42)
    with pytest.raises(ValueError):
        lpi.PositivePiParam(1, basis="legendre")
    with pytest.raises(ValueError):
        lpi.PositivePiParam(-1)


def test_realize_unit_multiplier():
    p = lpi.PositivePiParam(0, basis="theta")
    M = np.zeros((3, 3), dtype=int)
    M[0, 0] = 1
    assert lpi.realize_positive(p, M) == PiOperator.identity(1)


def test_realize_all_ones():
    # Zop v = (v, ∫_0^s v, ∫_s^1 v) so <v, P v> = ||v||^2 + 2(∫v)^2 + (∫v)^2
    p = lpi.PositivePiParam(0, basis="theta")
    P = lpi.realize_positive(p, np.ones((3, 3), dtype=int))
    assert P.R0 == PolyMat1.constant([[1]])
    assert P.R1 == PolyMat2.from_dict(1, 1, {(0, 0): {(0, 0): 3}})
    assert P.R2 == P.R1
    v = parse_poly1("s")
    assert as_quadratic_form(P, v, v) == Fraction(1, 3) + 3 * Fraction(1, 4)
    Pv = poly_callable(apply_poly(P, v))
    assert quad_inner(poly_callable(v), Pv) == pytest.approx(13 / 12, rel=1e-13)


def test_realize_rejects_bad_input():
    p = lpi.PositivePiParam(1)
    with pytest.raises(DimensionError):
        lpi.realize_positive(p, np.eye(3, dtype=int))
    M = np.zeros((p.size, p.size), dtype=int)
    M[0, 1] = 1
    with pytest.raises(ValueError):
        lpi.realize_positive(p, M)


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["theta", "tensor"]))
def test_realized_operator_is_coercive(seed, basis):
    rng = np.random.default_rng(seed)
    ridge = Fraction(1, 100)
    p = lpi.PositivePiParam(1, nx=2, a=Fraction(-1, 2), b=1, ridge=ridge, basis=basis)
    L = rng.integers(-3, 4, size=(p.size, p.size))
    M = L @ L.T
    P = lpi.realize_positive(p, M)
    for _ in range(100 // 8):
        v = random_poly1(rng, 2, 1, 3)
        lhs = as_quadratic_form(P, v, v)
        assert lhs >= ridge * inner(v, v, p.a, p.b)


# -- assembly -----------------------------------------------------------------------------


def test_transport_problem_shape(transport):
    prob = lpi.assemble_lpi(transport, 1, basis="theta")
    assert prob.block_sizes[0] == 6
    assert len(prob.block_sizes) == 2
    assert prob.n_constraints > 0
    assert np.all(prob.row <= prob.col)
    assert np.all(prob.row < np.asarray(prob.block_sizes)[prob.blk])


def test_slack_degree_too_small(transport):
    with pytest.raises(lpi.DegreeTooSmallError, match="increase degree"):
        lpi.assemble_lpi(transport, 2, h_degree=0)


def test_invalid_margins(transport):
    with pytest.raises(ValueError):
        lpi.assemble_lpi(transport, 1, alpha=0)
    with pytest.raises(ValueError):
        lpi.assemble_lpi(transport, -1)


def test_dense_constraints_are_symmetric(heat9_problem):
    for k in range(0, heat9_problem.n_constraints, 17):
        for b in range(len(heat9_problem.block_sizes)):
            F = heat9_problem.dense_constraint(k, b)
            np.testing.assert_array_equal(F, F.T)


# -- SDPA export -----------------------------------------------------------------------------


def test_sdpa_round_trip_is_bit_exact(heat9_problem, tmp_path):
    path = tmp_path / "heat9.dat-s"
    lpi.write_sdpa(heat9_problem, path)
    back = lpi.read_sdpa(path)
    assert back == heat9_problem
    assert back.val.tobytes() == heat9_problem.val.tobytes()
    assert back.rhs.tobytes() == heat9_problem.rhs.tobytes()
    lpi.write_sdpa(back, tmp_path / "again.dat-s")
    assert (tmp_path / "again.dat-s").read_bytes() == path.read_bytes()


def test_sdpa_parser_rejects_garbage(tmp_path):
    path = tmp_path / "bad.dat-s"
    path.write_text("2\n1\n3\n1.0 2.0\n1 1 1 1 oops\n")
    with pytest.raises(lpi.SdpaFormatError):
        lpi.read_sdpa(path)


def test_equality_residual_of_solution(transport):
    prob = lpi.assemble_lpi(transport, 1)
    res = lpi.solve_sdp(prob)
    assert res.status == "solved"
    assert np.max(np.abs(prob.residuals(res.Y))) < 1e-6


# -- proofs -------------------------------------------------------------------------------------


def test_transport_certificate(transport_cert, transport):
    rep = transport_cert.report
    assert rep.passed
    assert rep.equality_residual < 1e-6 * rep.scale
    assert rep.decay_rate > 0 and rep.overshoot >= 1
    again = lpi.verify_certificate(transport_cert, transport)
    assert again.passed
    assert oracle.spectral_abscissa(transport) < 0


def test_heat_without_reaction_is_proven():
    pie = convert(load_model("heat_dirichlet", lam=0))
    out, _ = lpi.prove_stability(pie, 1)
    assert isinstance(out, lpi.StabilityCertificate)
    assert oracle.spectral_abscissa(pie) < 0


def test_heat_below_threshold_is_proven():
    pie = convert(load_model("heat_dirichlet", lam=9))
    out, prob = lpi.prove_stability(pie, 2)
    assert isinstance(out, lpi.StabilityCertificate)
    assert out.report.passed
    assert oracle.spectral_abscissa(pie) < 0


@pytest.mark.parametrize("d", [1, 2, 3])
def test_unstable_heat_is_not_proven(d):
    pie = convert(load_model("heat_dirichlet", lam=15))
    out, _ = lpi.prove_stability(pie, d)
    assert isinstance(out, (lpi.Infeasible, lpi.BackendFailure))
    assert oracle.spectral_abscissa(pie) == pytest.approx(15 - np.pi**2, rel=0.01)


@pytest.mark.parametrize("name,values", [("transport", {}), ("heat_dirichlet", {"lam": 0})])
def test_degree_monotonicity(name, values):
    pie = convert(load_model(name, **values))
    outs = [lpi.prove_stability(pie, d)[0] for d in (1, 2)]
    assert all(isinstance(o, lpi.StabilityCertificate) for o in outs)


def test_scaling_T_and_A_keeps_status(transport):
    k = Fraction(3)
    scaled = PieSystem(transport.T.scale(k), transport.A.scale(k), transport.partition)
    out, _ = lpi.prove_stability(scaled, 1)
    assert isinstance(out, lpi.StabilityCertificate)
    heat = convert(load_model("heat_dirichlet", lam=15))
    scaled = PieSystem(heat.T.scale(k), heat.A.scale(k), heat.partition)
    out, _ = lpi.prove_stability(scaled, 1)
    assert not isinstance(out, lpi.StabilityCertificate)


# -- planted defects ----------------------------------------------------------------------------


def test_shifted_multiplier_matrix_is_rejected(transport_cert, transport):
    bad = copy.deepcopy(transport_cert)
    bad.M_R = bad.M_R - 1e-3 * np.eye(bad.M_R.shape[0])
    rep = lpi.verify_certificate(bad, transport)
    assert not rep.passed
    assert rep.min_eig_R < 0
    assert any("M_R" in r for r in rep.reasons)


def test_zeroed_parameter_entry_breaks_identity(transport_cert, transport):
    bad = copy.deepcopy(transport_cert)
    i, j = np.unravel_index(np.argmax(np.abs(bad.M_R - np.diag(np.diag(bad.M_R)))), bad.M_R.shape)
    bad.M_R[i, j] = bad.M_R[j, i] = 0.0
    rep = lpi.verify_certificate(bad, transport)
    assert not rep.passed


def test_zeroed_kernel_coefficient_is_detected(transport_cert, transport):
    bad = copy.deepcopy(transport_cert)
    R1 = np.array(bad.R.R1.coeffs, dtype=float)
    idx = np.unravel_index(np.argmax(np.abs(R1)), R1.shape)
    R1[idx] = 0.0
    bad.R = PiOperator(bad.R.R0, PolyMat2(R1, exact=False), bad.R.R2, bad.R.a, bad.R.b)
    rep = lpi.verify_certificate(bad, transport)
    assert not rep.passed
    assert any("differs from the realized" in r for r in rep.reasons)


def test_wrong_delta_is_detected(transport_cert, transport):
    bad = copy.deepcopy(transport_cert)
    bad.delta = 10.0
    assert not lpi.verify_certificate(bad, transport).passed


def test_certificate_for_another_system_is_rejected(transport_cert):
    other = convert(load_model("mckendrick", c=Fraction(1, 2)))
    assert not lpi.verify_certificate(transport_cert, other).passed


def test_unknown_backend():
    with pytest.raises(lpi.BackendUnavailableError):
        lpi.solve_sdp(lpi.assemble_lpi(convert(load_model("transport")), 1), backend="nope")
