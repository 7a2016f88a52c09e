import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slsdeploy.cli import chain_plant
from slsdeploy.lti import LTISystem, SpectralSeries
from slsdeploy.synthesis import (InfeasibleError, SparsityPattern, SynthesisSpec, SystemResponseOF,
                                 closed_loop_maps, eval_controller_pointwise, eval_youla_pointwise,
                                 quadruple_from_phiuy, response_from_json, solve_ecls,
                                 synth_of_h2_quadruple, synth_of_youla, synth_sf_h2,
                                 validate_of_achievability, validate_sf_achievability)

from oracles import grid_then_parabola, nullspace_ecls, scalar_fir_objective

SCALAR = LTISystem.state_feedback([[0.5]], [[1.0]])


# -- scalar oracle, written before the solver ----------------------------------------

def test_grid_oracle_finds_the_scalar_optimum():
    b_star, b_grid = grid_then_parabola(scalar_fir_objective)
    assert b_star == pytest.approx(-5 / 18, abs=1e-12)
    assert abs(b_grid - b_star) <= 1e-4


def test_scalar_synthesis_matches_grid_oracle():
    b_star, _ = grid_then_parabola(scalar_fir_objective)
    res = synth_sf_h2(SCALAR, SynthesisSpec(2))
    px, pu = res.response.phi_x, res.response.phi_u
    assert pu[1][0, 0] == pytest.approx(b_star, abs=1e-9)
    assert px[2][0, 0] == pytest.approx(0.5 + b_star, abs=1e-9)
    assert pu[2][0, 0] == pytest.approx(-0.5 * (0.5 + b_star), abs=1e-9)
    assert res.objective == pytest.approx(scalar_fir_objective(b_star), abs=1e-9)


def test_scalar_synthesis_frozen_values():
    res = synth_sf_h2(SCALAR, SynthesisSpec(2))
    px, pu = res.response.phi_x, res.response.phi_u
    np.testing.assert_allclose([px[1][0, 0], px[2][0, 0], pu[1][0, 0], pu[2][0, 0]],
                               [1.0, 2 / 9, -5 / 18, -1 / 9], atol=1e-12)
    assert res.objective == pytest.approx(1 + 45 / 324, abs=1e-12)


# -- equality-constrained least squares -------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_ecls_matches_nullspace_oracle(seed, m):
    rng = np.random.default_rng(seed)
    n = 6
    F, g = rng.standard_normal((9, n)), rng.standard_normal(9)
    E, f = rng.standard_normal((m, n)), rng.standard_normal(m)
    sol = solve_ecls(F, g, E, f)
    np.testing.assert_allclose(sol.z, nullspace_ecls(F, g, E, f), atol=1e-8)
    assert sol.constraint_residual <= 1e-10
    assert sol.kkt_residual <= 1e-8


def test_ecls_handles_redundant_constraints():
    F = np.eye(3)
    E = np.array([[1.0, 1.0, 0.0], [2.0, 2.0, 0.0]])
    sol = solve_ecls(F, np.zeros(3), E, [1.0, 2.0])
    np.testing.assert_allclose(sol.z, [0.5, 0.5, 0.0], atol=1e-12)


def test_ecls_reports_worst_inconsistent_row():
    E = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(InfeasibleError) as info:
        solve_ecls(np.eye(2), None, E, [0.0, 1.0, 0.0], labels=["a", "b", "c"])
    assert info.value.constraint in ("a", "b")
    assert info.value.residual == pytest.approx(0.5)


# -- state feedback -------------------------------------------------------------------------

def test_column_and_stacked_solves_agree(chain3):
    spec = SynthesisSpec(5)
    a = synth_sf_h2(chain3, spec).response
    b = synth_sf_h2(chain3, spec, by_column=False).response
    np.testing.assert_allclose(a.phi_x.elements, b.phi_x.elements, atol=1e-12)
    np.testing.assert_allclose(a.phi_u.elements, b.phi_u.elements, atol=1e-12)


def test_sf_response_is_achievable(chain3, chain3_sf):
    rep = validate_sf_achievability(chain3_sf, chain3)
    assert rep["ok"], rep
    assert len(rep["recursion_by_tau"]) == chain3_sf.horizon - 1


def test_sf_rejects_output_feedback_plant(chain3_of):
    with pytest.raises(ValueError):
        synth_sf_h2(chain3_of, SynthesisSpec(3))


@settings(max_examples=15, deadline=None)
@given(st.floats(-1.5, 1.5), st.floats(0.2, 2.0), st.integers(1, 5))
def test_objective_nonincreasing_in_horizon(a, b, T):
    sys = LTISystem.state_feedback([[a]], [[b]])
    short = synth_sf_h2(sys, SynthesisSpec(T)).objective
    longer = synth_sf_h2(sys, SynthesisSpec(T + 1)).objective
    assert longer <= short + 1e-9


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 2), st.integers(2, 6))
def test_pattern_zeros_are_exact(bw, T):
    sys = chain_plant(5)
    res = synth_sf_h2(sys, SynthesisSpec(T, pattern=SparsityPattern.banded(bw, ("phi_x", "phi_u"))))
    i, j = np.indices((5, 5))
    outside = np.abs(i - j) > bw
    for tau in range(1, T + 1):
        assert not res.response.phi_x[tau][outside].any()
        assert not res.response.phi_u[tau][outside].any()
    assert validate_sf_achievability(res.response, sys)["ok"]


def test_over_restrictive_pattern_is_infeasible(chain3):
    spec = SynthesisSpec(3, pattern=SparsityPattern.banded(0, ("phi_x", "phi_u")))
    with pytest.raises(InfeasibleError) as info:
        synth_sf_h2(chain3, spec)
    assert "recursion" in info.value.constraint


def test_pattern_forbidding_identity_is_infeasible(chain3):
    mask = np.ones((3, 3), dtype=bool)
    mask[1, 1] = False
    with pytest.raises(InfeasibleError):
        synth_sf_h2(chain3, SynthesisSpec(3, pattern=SparsityPattern(masks={"phi_x": mask})))


def test_soft_terminal_residual_shrinks_with_penalty():
    sys = LTISystem.state_feedback([[1.2]], [[1.0]])
    lo = synth_sf_h2(sys, SynthesisSpec(3, terminal="soft", penalty=10.0))
    hi = synth_sf_h2(sys, SynthesisSpec(3, terminal="soft", penalty=1e6))
    hard = synth_sf_h2(sys, SynthesisSpec(3))
    assert lo.terminal_residual > hi.terminal_residual > 0.0
    assert hard.terminal_residual <= 1e-12


@pytest.mark.parametrize("kwargs", [{"horizon": 0}, {"horizon": 2, "terminal": "loose"},
                                    {"horizon": 2, "terminal": "soft", "penalty": 0.0}])
def test_spec_validation(kwargs):
    with pytest.raises(ValueError):
        SynthesisSpec(**kwargs)


# -- output feedback --------------------------------------------------------------------------

def test_quadruple_with_full_state_recovers_sf(chain3):
    T = 4
    sf = synth_sf_h2(chain3, SynthesisSpec(T))
    of = synth_of_h2_quadruple(chain3, SynthesisSpec(T, dy_weight=np.zeros((3, 3))))
    assert of.objective == pytest.approx(sf.objective, rel=1e-9)
    np.testing.assert_allclose(of.response.phi_xx.taps(1, T), sf.response.phi_x.taps(1, T), atol=1e-8)


def test_quadruple_is_achievable(chain3_of):
    res = synth_of_h2_quadruple(chain3_of, SynthesisSpec(4))
    rep = validate_of_achievability(res.response, chain3_of)
    assert rep["ok"], rep


def test_youla_quadruple_within_tail_bound(chain3_of, chain3_phiuy):
    quad = quadruple_from_phiuy(chain3_of, chain3_phiuy, 60)
    rep = validate_of_achievability(quad, chain3_of)
    assert rep["in_horizon"] <= 1e-12
    assert rep["terminal"] <= quad.tail_bound
    assert rep["ok"]


def test_youla_beats_open_loop(chain3_of):
    res = synth_of_youla(chain3_of, SynthesisSpec(4))
    zero = SpectralSeries(0, np.zeros((5, 3, 2)))
    maps = closed_loop_maps(chain3_of, zero, 60)
    open_loop = sum(float(np.sum(maps[k].elements ** 2)) for k in ("xx", "xy", "ux", "uy"))
    assert res.objective < open_loop


def test_youla_rejects_unstable_plant():
    sys = LTISystem([[1.1]], [[1.0]], [[1.0]])
    with pytest.raises(ValueError):
        synth_of_youla(sys, SynthesisSpec(2))


def test_youla_respects_pattern():
    sys = chain_plant(4, outputs=[0, 1, 2, 3])
    spec = SynthesisSpec(3, pattern=SparsityPattern.banded(1, ("phi_uy",)))
    phi = synth_of_youla(sys, spec).response
    i, j = np.indices((4, 4))
    assert not phi.elements[:, np.abs(i - j) > 1].any()


@pytest.mark.parametrize("z", [1.5, 1.05j * 1.2, -2.0 + 0.5j])
def test_pointwise_formulas_agree(chain3_of, chain3_phiuy, z):
    quad = quadruple_from_phiuy(chain3_of, chain3_phiuy, 120)
    np.testing.assert_allclose(eval_controller_pointwise(quad, chain3_of, z),
                               eval_youla_pointwise(chain3_of, chain3_phiuy, z), atol=1e-9)


def test_pointwise_sf_controller_closes_the_loop(chain3, chain3_sf):
    z = 1.7 + 0.2j
    K = eval_controller_pointwise(chain3_sf, chain3, z)
    A, B = chain3.A, chain3.B
    closed = np.linalg.inv(z * np.eye(3) - A - B @ K)
    np.testing.assert_allclose(closed, chain3_sf.phi_x.evaluate(z), atol=1e-10)


def test_pointwise_rejects_points_inside_the_disk(chain3, chain3_sf):
    with pytest.raises(ValueError):
        eval_controller_pointwise(chain3_sf, chain3, 0.9)


def test_response_json_round_trip(chain3_of, chain3_sf, chain3_phiuy):
    back = response_from_json(chain3_sf.to_json())
    np.testing.assert_array_equal(back.phi_u.elements, chain3_sf.phi_u.elements)
    quad = quadruple_from_phiuy(chain3_of, chain3_phiuy, 30)
    back = response_from_json(quad.to_json())
    assert isinstance(back, SystemResponseOF) and back.truncated
    assert back.tail_bound == quad.tail_bound
    with pytest.raises(ValueError):
        response_from_json({"kind": "mystery"})
