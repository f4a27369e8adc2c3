import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tzliq.model import (
    Affine,
    Constant,
    Mark,
    ModelError,
    ModelParams,
    Sinusoidal,
    alpha,
    block_term,
    coefficient_from_dict,
    hamiltonian_zeroth,
    hamiltonian_zeroth_du,
    is_space_constant,
    theta,
    validate,
)


def unit_params(**kw):
    base = dict(q=2.0, T=1.0, a=0.0, beta=0.0, sigma=0.0, sigma_bar=1.0, eta=1.0, lam=1.0)
    base.update(kw)
    return ModelParams(**base)


def test_conjugate_exponent():
    p = unit_params(q=1.7)
    assert 1 / p.q + 1 / p.q_star == pytest.approx(1.0, abs=1e-15)
    assert p.p == pytest.approx(p.q_star - 1)


def test_validate_all_bounds_met_with_equality():
    assert validate(unit_params()) == []


def test_validate_flags_degenerate_signal_noise_everywhere():
    p = unit_params(sigma_bar=0.0)
    found = [v for v in validate(p, [0.0, 0.5, 1.0], [0.0, 1.0, 2.0]) if v.kind == "superparabolicity"]
    assert len(found) == 9


def test_validate_flags_eta_floor():
    kinds = {v.kind for v in validate(unit_params(eta=0.5))}
    assert "eta floor" in kinds


def test_validate_flags_lipschitz_and_bounds():
    p = unit_params(lam=Sinusoidal(0.5, 0.0, 1.0, 0.0), beta=lambda t, y: 3.0 * np.sin(y))
    kinds = {v.kind for v in validate(p)}
    assert "beta bound" in kinds
    assert "beta lipschitz" in kinds


def test_validate_rejects_q_at_most_one():
    with pytest.raises(ModelError):
        validate(unit_params(q=1.0))


def test_validate_rejects_unevaluable_coefficient():
    def bad(t, y):
        raise RuntimeError("boom")

    with pytest.raises(ModelError):
        validate(unit_params(lam=bad))


def test_mark_weights_must_be_positive():
    with pytest.raises(ModelError):
        unit_params(marks=(Mark(1.0, 0.0),))


@pytest.mark.parametrize("s, sb, expected", [(0.0, 1.0, 0.5), (1.0, 1.0, 1.0), (0.3, 0.4, 0.125)])
def test_alpha(s, sb, expected):
    assert float(alpha(unit_params(sigma=s, sigma_bar=sb), 0.0, 0.0)) == pytest.approx(expected, rel=1e-14)


@pytest.mark.parametrize("dy, expected", [(0.0, 1.0), (1.0, 0.5), (3.0, 0.1)])
def test_theta(dy, expected):
    p = unit_params(a=-2.0)
    assert float(theta(p, p.a + dy)) == pytest.approx(expected, rel=1e-15)


def test_hamiltonian_at_zero_is_running_penalty():
    p = unit_params(lam=Affine(0.1, 0.5, 0.0, 1.0), marks=(Mark(1.0, 1.0, 1.0),))
    assert float(hamiltonian_zeroth(p, 0.3, 0.8, 0.0)) == pytest.approx(0.5)


def test_hamiltonian_finite_gamma_hand_value():
    p = unit_params(lam=0.5, marks=(Mark(1.0, 1.0, 1.0),))
    assert float(hamiltonian_zeroth(p, 0.0, 0.0, 1.0)) == pytest.approx(-1.0, abs=1e-14)


def test_hamiltonian_infinite_gamma_cancels_jump_terms():
    p = unit_params(lam=0.0, marks=(Mark(1.0, 1.0, math.inf), Mark(2.0, 0.5, math.inf)))
    assert float(hamiltonian_zeroth(p, 0.0, 0.0, 2.0)) == pytest.approx(-4.0, abs=1e-14)


def test_hamiltonian_rejects_negative_u():
    with pytest.raises(ValueError):
        hamiltonian_zeroth(unit_params(), 0.0, 0.0, -1e-3)


def test_block_term_limits():
    u = np.array([0.0, 0.5, 3.0])
    np.testing.assert_array_equal(block_term(0.0, u, 1.6), 0.0)
    np.testing.assert_array_equal(block_term(math.inf, u, 1.6), u)


@settings(max_examples=200, deadline=None)
@given(
    q=st.floats(1.2, 4.0),
    gamma=st.one_of(st.floats(0.0, 50.0), st.just(math.inf)),
    u=st.floats(0.0, 1e3),
)
def test_block_term_between_zero_and_u(q, gamma, u):
    b = float(block_term(gamma, u, q))
    assert -1e-12 <= b <= u * (1 + 1e-12) + 1e-300


@settings(max_examples=100, deadline=None)
@given(
    q=st.floats(1.2, 4.0),
    lam=st.floats(0.0, 2.0),
    eta=st.floats(0.2, 2.0),
    gammas=st.lists(st.one_of(st.floats(0.0, 10.0), st.just(math.inf)), min_size=0, max_size=3),
)
def test_hamiltonian_sandwich_and_monotone(q, lam, eta, gammas):
    marks = tuple(Mark(float(i), 0.5 + i, g) for i, g in enumerate(gammas))
    p = unit_params(q=q, lam=lam, eta=eta, marks=marks, Lambda=max(2.0, eta, lam))
    u = np.concatenate([[0.0], np.logspace(-4, 3, 60)])
    h = hamiltonian_zeroth(p, 0.0, 0.0, u)
    power = u ** p.q_star / (p.p * eta ** p.p)
    upper = lam - power
    lower = upper - p.mu_total * u
    scale = 1e-12 * (1 + np.abs(power) + p.mu_total * u)
    assert np.all(h <= upper + scale)
    assert np.all(h >= lower - scale)
    assert np.all(np.diff(h) <= scale[1:])
    assert np.all(hamiltonian_zeroth_du(p, 0.0, 0.0, u[1:]) <= 1e-12 * (1 + u[1:] ** p.p))


def test_theta_regularity_audit():
    y = np.linspace(0.0, 50.0, 20001)
    th = theta(unit_params(), y)
    d1 = np.gradient(th, y)
    d2 = np.gradient(d1, y)
    assert np.max(np.abs(d1)) < 1.0
    assert np.max(np.abs(d2)) < 2.5
    assert np.max(th * y) <= 0.5 + 1e-12


def test_affine_is_clipped_and_serializable():
    f = Affine(0.0, 2.0, -1.0, 1.0)
    np.testing.assert_allclose(f(0.0, np.array([-3.0, 0.25, 3.0])), [-1.0, 0.5, 1.0])
    g = coefficient_from_dict(f.to_dict())
    assert g == f


def test_space_constant_detection():
    assert is_space_constant(unit_params(lam=Sinusoidal(0.5, 0.2, 1.0, 0.0)))
    assert not is_space_constant(unit_params(lam=Affine(0.0, 1.0, 0.0, 1.0)))
    assert isinstance(unit_params().eta, Constant)
