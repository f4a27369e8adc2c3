import math

import numpy as np
import pytest

from tzliq import fixtures
from tzliq.hjb import (
    LADDER_LIMIT,
    EnvelopeViolation,
    Grid,
    LadderError,
    OrderingError,
    SolverError,
    ValueSurface,
    comparison_harness,
    default_tolerance,
    envelope_margins,
    interpolate,
    load_surface,
    lower_envelope,
    lower_envelope_rate_integral,
    ode_envelopes,
    power_envelope,
    read_surface_csv,
    riccati_envelope,
    save_surface,
    scheme_error_estimate,
    singular_limit,
    solve_ladder,
    solve_truncated,
    time_grid,
    write_surface_csv,
)
from tzliq.model import Affine, Mark

from .conftest import closed_form_oracle


# -- grids ---------------------------------------------------------------


def test_time_grid_layer_is_geometric_and_ends_at_T():
    t = time_grid(1.0, 50, 10, 1.2)
    assert t[0] == 0.0 and t[-1] == 1.0
    assert t.size == 51
    steps = np.diff(t)[-10:]
    np.testing.assert_allclose(steps[:-1] / steps[1:], 1.2, rtol=1e-9)


def test_grid_rejects_bad_input():
    with pytest.raises(ValueError):
        Grid(np.array([0.0, 1.0]), np.array([0.0, 1.0]))
    with pytest.raises(ValueError):
        Grid(np.linspace(0, 1, 5), np.array([0.0, 0.5, 0.5, 1.0]))


def test_refined_grid_keeps_coarse_nodes():
    g = Grid.build(0.0, 2.0, 11, 1.0, 20)
    r = g.refined()
    np.testing.assert_array_equal(r.t[0::2], g.t)
    np.testing.assert_allclose(r.y[0::2], g.y, rtol=0, atol=1e-15)
    assert r.h == pytest.approx(g.h / 2)


# -- closed-form oracles ---------------------------------------------------


def test_oracle_truncated_solution_matches_closed_form(oracle):
    grid = Grid.build(0.0, 5.0, 401, 1.0, 200)
    s = solve_truncated(oracle, grid, 10.0)
    exact = closed_form_oracle(10.0, 1.0 - grid.t)
    assert abs(s.values[0, 0] - 0.502485) < 1e-6
    assert abs(s.values[0, 0] / (1 / (1.1 * math.e - 1)) - 1) < 1e-3
    np.testing.assert_allclose(s.values, np.broadcast_to(exact[:, None], s.values.shape), rtol=1e-6)
    np.testing.assert_array_equal(s.values[-1], 10.0)
    assert s.psi_zero and s.truncation_level == 10.0


def test_space_constant_collapse(oracle):
    s = solve_truncated(oracle, Grid.build(0.0, 5.0, 41, 1.0, 50), 5.0)
    spread = s.values.max(axis=1) - s.values.min(axis=1)
    assert np.max(spread / s.values.max(axis=1)) < 1e-12


def test_gamma_infinite_model_follows_riccati_ode():
    p = fixtures.gamma_upper()
    grid = Grid.build(0.0, 5.0, 21, 1.0, 200)
    for M in (10.0, 1e3):
        s = solve_truncated(p, grid, M)
        ode = riccati_envelope(1.0, 1.0, M, p)
        rows = grid.t <= 0.99
        ref = ode(grid.t[rows])
        assert np.max(np.abs(s.values[rows, 0] / ref - 1)) < 1e-5


def test_zero_terminal_and_zero_penalty_gives_zero(oracle):
    s = solve_truncated(oracle, Grid.build(0.0, 3.0, 21, 1.0, 30), 0.0)
    assert np.all(s.values == 0.0)


def test_unresolved_reaction_step_raises(oracle):
    # a huge terminal level with a one-substep budget cannot be resolved
    with pytest.raises(SolverError):
        solve_truncated(oracle, Grid.build(0.0, 3.0, 11, 1.0, 2, layer_steps=0), 1e8, max_substeps=1)


def test_solver_rejects_invalid_model():
    with pytest.raises(ValueError, match="validation"):
        solve_truncated(fixtures.broken(), Grid.build(0.0, 3.0, 11, 1.0, 10), 1.0)


# -- envelopes -----------------------------------------------------------


def test_lower_envelope_limit_value(oracle):
    assert float(lower_envelope(oracle, math.inf, 0.0)) == pytest.approx(1 / (math.e - 1), rel=1e-14)
    assert 1 / (math.e - 1) == pytest.approx(0.581977, abs=1e-6)


def test_envelopes_hit_terminal_level(oracle):
    env = ode_envelopes(oracle, 7.0)
    assert float(env.lower(1.0)) == pytest.approx(7.0)
    assert float(env.upper(1.0)) == pytest.approx(7.0)


def test_power_envelope_closed_form():
    p = fixtures.oracle().replace(lam=0.0)
    assert float(power_envelope(p, math.inf, 0.5)) == pytest.approx(2.0)


def test_riccati_without_source_matches_power_envelope():
    p = fixtures.oracle()
    G = riccati_envelope(0.0, 1.0, math.inf, p)
    t = np.linspace(0.0, 0.999, 50)
    np.testing.assert_allclose(G(t), power_envelope(p, math.inf, t), rtol=1e-9)


def test_lower_envelope_zero_mass_limit():
    p = fixtures.oracle().replace(marks=())
    lim = lower_envelope(p, 4.0, 0.3)
    near = lower_envelope(p.replace(marks=(Mark(1.0, 1e-9, 0.0),)), 4.0, 0.3)
    assert float(lim) == pytest.approx(float(near), rel=1e-7)


def test_lower_rate_integral_matches_quadrature():
    from scipy.integrate import quad

    for p in (fixtures.dark_pool(), fixtures.general(), fixtures.oracle().replace(marks=())):
        for M in (3.0, math.inf):
            exact = quad(lambda s: (lower_envelope(p, M, s) / p.Lambda) ** p.p, 0, 0.8)[0]
            assert float(lower_envelope_rate_integral(p, M, 0.8)) == pytest.approx(exact, rel=1e-8)


# -- ladder --------------------------------------------------------------


def test_ladder_rungs_match_closed_form(oracle):
    grid = Grid.build(0.0, 3.0, 21, 1.0, 200)
    ladder = solve_ladder(oracle, grid, [1.0, 10.0, 100.0])
    for s in ladder.surfaces:
        exact = closed_form_oracle(s.truncation_level, 1.0 - grid.t)
        np.testing.assert_allclose(s.values[:, 0], exact, rtol=1e-6)
    at0 = [s.values[0, 0] for s in ladder.surfaces]
    assert at0[0] < at0[1] < at0[2] < 1 / (math.e - 1)


def test_equal_rungs_are_identical():
    p = fixtures.dark_pool()
    grid = Grid.build(0.0, 4.0, 31, 1.0, 40)
    ladder = solve_ladder(p, grid, [5.0, 5.0], tau_mono=0.0)
    np.testing.assert_array_equal(ladder.surfaces[0].values, ladder.surfaces[1].values)


def test_ladder_rejects_decreasing_schedule(oracle, coarse_grid):
    with pytest.raises(ValueError):
        solve_ladder(oracle, coarse_grid, [10.0, 1.0])


def test_ladder_reports_non_monotone_rungs(oracle, coarse_grid, monkeypatch):
    import tzliq.hjb as hjb

    real = hjb.solve_truncated

    def flipped(params, grid, M, **kw):
        return real(params, grid, 1.0 / M, **kw)

    monkeypatch.setattr(hjb, "solve_truncated", flipped)
    with pytest.raises(LadderError) as info:
        hjb.solve_ladder(oracle, coarse_grid, [1.0, 10.0], tau_mono=1e-6)
    assert info.value.ladder.max_violation > 0


@pytest.mark.parametrize("name", ["oracle", "lambda_y", "dark_pool"])
def test_ladder_monotone_and_inside_envelopes(name):
    p = fixtures.get(name)
    grid = Grid.build(0.0, 5.0, 41, 1.0, 100)
    ladder = solve_ladder(p, grid, [1.0, 10.0, 100.0, 1000.0])
    assert ladder.max_violation <= ladder.tau_mono
    for s in ladder.surfaces:
        below, above = envelope_margins(s, ode_envelopes(p, s.truncation_level))
        assert below <= ladder.tau_mono and above <= ladder.tau_mono


def test_singular_limit_oracle_matches_closed_form(oracle):
    grid = Grid.build(0.0, 3.0, 11, 1.0, 200)
    s = singular_limit(oracle, grid, [1e3, 1e4, 1e5], t_cut=0.5)
    assert s.truncation_level == LADDER_LIMIT
    assert s.t_max == pytest.approx(0.5)
    exact = closed_form_oracle(1e5, 1.0 - s.grid.t)
    np.testing.assert_allclose(s.values[:, 0], exact, rtol=1e-3)


def test_singular_limit_at_time_zero_is_one_row(oracle):
    s = singular_limit(oracle, Grid.build(0.0, 3.0, 11, 1.0, 100), [1e3, 1e4, 1e5], t_cut=0.0)
    assert s.values.shape == (1, 11)


def test_singular_limit_short_schedule_not_converged(oracle):
    with pytest.raises(LadderError, match="not converged"):
        singular_limit(oracle, Grid.build(0.0, 3.0, 11, 1.0, 100), [1.0, 10.0], t_cut=0.5)


def test_singular_limit_rejects_t_cut_at_horizon(oracle, coarse_grid):
    with pytest.raises(ValueError):
        singular_limit(oracle, coarse_grid, [1.0], t_cut=1.0)


def test_singular_limit_envelope_violation_detected(oracle, coarse_grid, monkeypatch):
    import tzliq.hjb as hjb

    real = hjb.ode_envelopes
    monkeypatch.setattr(hjb, "ode_envelopes", lambda p, M: hjb.EnvelopePair(lambda t: 2 * real(p, M).lower(t), real(p, M).upper, M))
    with pytest.raises(EnvelopeViolation):
        hjb.singular_limit(oracle, coarse_grid, [10.0], t_cut=0.5)


def test_general_q2_model_has_inverse_time_bounds():
    p = fixtures.dark_pool()
    grid = Grid.build(0.0, 5.0, 41, 1.0, 100)
    s = singular_limit(p, grid, [1e3, 1e4, 1e5], t_cut=0.9, eps_ladder=1e-3)
    env = ode_envelopes(p, 1e5)
    tau = 1.0 - s.grid.t
    c = np.min(env.lower(s.grid.t) * tau)
    C = np.max(env.upper(s.grid.t) * tau)
    scaled = s.values * tau[:, None]
    assert c > 0
    assert np.all(scaled >= c * (1 - 1e-6)) and np.all(scaled <= C * (1 + 1e-6))


# -- interpolation and I/O --------------------------------------------------


def small_surface(values, time_power=None):
    g = Grid(np.array([0.0, 1.0, 2.0]), np.array([0.0, 0.5, 1.0]))
    meta = {} if time_power is None else {"time_power": time_power}
    return ValueSurface(g, values, 1.0, meta=meta)


def test_interpolation_exact_on_nodes_and_linear_in_y():
    v = np.array([[1.0, 3.0, 5.0], [2.0, 4.0, 6.0], [1.0, 1.0, 1.0]])
    s = small_surface(v)
    for k, t in enumerate(s.grid.t):
        for j, y in enumerate(s.grid.y):
            assert float(interpolate(s, t, y)) == v[k, j]
    assert float(interpolate(s, 0.0, 0.5)) == pytest.approx(2.0)


def test_interpolation_of_space_constant_surface():
    s = small_surface(np.array([[2.0] * 3, [3.0] * 3, [4.0] * 3]), time_power=1.0)
    vals = interpolate(s, 0.3, np.linspace(0, 2, 7))
    assert np.ptp(vals) == 0.0


def test_interpolation_out_of_range():
    s = small_surface(np.ones((3, 3)))
    with pytest.raises(ValueError):
        interpolate(s, 1.5, 0.0)
    with pytest.raises(ValueError):
        interpolate(s, 0.5, -0.1)
    assert float(interpolate(s, 0.5, 9.0, clamp_y=True)) == 1.0


def test_power_time_interpolation_is_exact_for_riccati_profile(oracle):
    p = oracle.replace(marks=(), lam=0.0)
    g = Grid(np.linspace(0, 1, 3), time_grid(1.0, 10))
    exact = power_envelope(p, 10.0, g.t)
    s = ValueSurface(g, np.repeat(exact[:, None], 3, axis=1), 10.0, meta={"time_power": 1.0})
    t = np.linspace(0, 1, 37)
    np.testing.assert_allclose(interpolate(s, t, 0.5), power_envelope(p, 10.0, t), rtol=1e-12)


def test_surface_csv_and_npz_round_trip(tmp_path, oracle, coarse_grid):
    s = solve_truncated(oracle, coarse_grid, 3.0)
    write_surface_csv(s, tmp_path / "s.csv", header_lines=["seed=1"])
    t, y, u = read_surface_csv(tmp_path / "s.csv")
    np.testing.assert_array_equal(u, s.values)
    np.testing.assert_array_equal(t, s.grid.t)
    save_surface(s, tmp_path / "s.npz", provenance={"x": "y"})
    back = load_surface(tmp_path / "s.npz")
    np.testing.assert_array_equal(back.values, s.values)
    assert back.truncation_level == 3.0
    assert back.meta["time_power"] == s.meta["time_power"]


# -- comparison ----------------------------------------------------------


def test_comparison_identical_params_zero_violation():
    p = fixtures.dark_pool()
    v = comparison_harness(p, p, Grid.build(0.0, 4.0, 31, 1.0, 40), 10.0)
    assert v.max_violation == 0.0 and v.passed


def test_comparison_running_penalty_order(oracle, coarse_grid):
    v = comparison_harness(oracle, oracle.replace(lam=1.0), coarse_grid, 10.0)
    assert v.passed


def test_comparison_impact_order():
    base = fixtures.oracle().replace(Lambda=2.0)
    v = comparison_harness(base, base.replace(eta=2.0), Grid.build(0.0, 4.0, 31, 1.0, 60), 10.0)
    assert v.passed


def test_comparison_rejects_unordered_pair(oracle, coarse_grid):
    with pytest.raises(OrderingError):
        comparison_harness(oracle.replace(lam=1.0), oracle, coarse_grid, 10.0)


def test_comparison_y_dependent_pair():
    p1 = fixtures.lambda_y()
    p2 = p1.replace(lam=Affine(0.5, 0.5, 0.0, 1.0))
    v = comparison_harness(p1, p2, Grid.build(0.0, 5.0, 41, 1.0, 60), 100.0)
    assert v.passed


# -- accuracy properties ---------------------------------------------------


def oracle_errors(n_list, scheme="strang"):
    p = fixtures.oracle()
    out = []
    for n in n_list:
        g = Grid.build(0.0, 5.0, 11, 1.0, n)
        s = solve_truncated(p, g, 10.0, scheme=scheme)
        exact = closed_form_oracle(10.0, 1.0 - g.t)
        out.append(np.max(np.abs(s.values[:, 0] / exact - 1)))
    return np.array(out)


def test_grid_halving_second_order():
    e = oracle_errors([25, 50, 100, 200])
    assert np.all(e[:-1] / e[1:] >= 1.7)


def test_imex_option_is_first_order():
    e = oracle_errors([50, 100, 200], scheme="imex")
    ratios = e[:-1] / e[1:]
    assert np.all((ratios > 1.6) & (ratios < 2.5))


def test_scheme_error_estimate_brackets_true_error(oracle):
    g = Grid.build(0.0, 5.0, 11, 1.0, 50)
    est = scheme_error_estimate(oracle, g, 10.0)
    true = oracle_errors([50])[0]
    assert true <= est <= 20 * true
    assert default_tolerance(0.0) == 1e-10


def test_neumann_residual_shrinks_with_h():
    p = fixtures.lambda_y()
    res = []
    for n in (21, 41, 81):
        s = solve_truncated(p, Grid.build(0.0, 5.0, n, 1.0, 50), 10.0)
        res.append(np.max(np.abs(s.neumann_residual(1))))
    res = np.array(res)
    # ghost node: the one-sided quotient equals h/2 * u_yy + O(h^2)
    assert np.all(res[:-1] / res[1:] > 1.8)


def test_one_sided_neumann_option_converges_to_ghost():
    p = fixtures.lambda_y()
    gaps = []
    for n in (21, 41, 81):
        g = Grid.build(0.0, 5.0, n, 1.0, 50)
        s1 = solve_truncated(p, g, 10.0, neumann="one_sided")
        s2 = solve_truncated(p, g, 10.0)
        assert s1.neumann == "one_sided"
        gaps.append(np.max(np.abs(s1.values / s2.values - 1)))
    gaps = np.array(gaps)
    # both discretizations converge to the same solution
    assert np.all(gaps[:-1] / gaps[1:] > 1.6)
    assert gaps[-1] < 0.01


def test_right_boundary_insensitivity():
    p = fixtures.lambda_y()
    a = solve_truncated(p, Grid.build(0.0, 5.0, 101, 1.0, 60), 10.0)
    b = solve_truncated(p, Grid.build(0.0, 10.0, 201, 1.0, 60), 10.0)
    rows = a.grid.t <= 0.9
    cols = a.grid.y <= 2.5
    diff = np.abs(a.values[np.ix_(rows, cols)] / b.values[np.ix_(rows, cols)] - 1)
    assert diff.max() < 1e-3
