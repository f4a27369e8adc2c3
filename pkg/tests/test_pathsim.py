import math

import numpy as np
import pytest
from scipy import stats
from scipy.integrate import cumulative_trapezoid

from tzliq import fixtures
from tzliq.model import Mark, ModelParams
from tzliq.pathsim import (
    PathBatch,
    RngStream,
    _first_passage_pdf,
    _sample_argmin,
    euler_grid,
    occupation_check,
    simulate_batch,
    simulate_path,
    write_path_csv,
)


def signal_params(beta=0.0, sigma=0.0, sigma_bar=1.0, a=0.0, marks=(), T=1.0):
    return ModelParams(q=2.0, T=T, a=a, beta=beta, sigma=sigma, sigma_bar=sigma_bar, eta=1.0, lam=0.0, marks=marks)


@pytest.mark.parametrize("scheme", ["bridge", "projection"])
def test_no_motion_stays_at_barrier(scheme):
    path = simulate_path(signal_params(sigma_bar=0.0, a=1.0), 1.0, 0.1, RngStream(1), scheme=scheme)
    assert np.all(path.y == 1.0)
    assert np.all(path.dL == 0.0)


@pytest.mark.parametrize("scheme", ["bridge", "projection"])
def test_drift_into_barrier_is_absorbed_by_local_time(scheme):
    path = simulate_path(signal_params(beta=-1.0, sigma_bar=0.0, a=0.5), 0.5, 0.1, RngStream(1), scheme=scheme)
    assert np.all(path.y == 0.5)
    np.testing.assert_allclose(path.dL[1:], 0.1, rtol=1e-12)
    assert path.local_time == pytest.approx(1.0)
    assert path.times.size == 11


def test_simulate_path_preconditions():
    p = signal_params(a=1.0)
    with pytest.raises(ValueError):
        simulate_path(p, 0.5, 0.1, RngStream(0))
    with pytest.raises(ValueError):
        simulate_path(p, 1.0, 0.0, RngStream(0))


def test_euler_grid_short_last_step():
    t = euler_grid(1.0, 0.3)
    np.testing.assert_allclose(t, [0.0, 0.3, 0.6, 0.9, 1.0])
    assert euler_grid(1.0, 0.25)[-1] == 1.0 and euler_grid(1.0, 0.25).size == 5


def test_poisson_event_count_mean():
    p = signal_params(marks=(Mark(1.0, 1.5), Mark(2.0, 0.5)))
    stats_ = occupation_check(simulate_batch(p, 0.0, 0.1, 100_000, RngStream(11)))
    mean = stats_.event_counts.mean()
    assert abs(mean - 2.0) <= 3 * math.sqrt(2.0 / 100_000)


def test_event_marks_follow_weights():
    weights = np.array([1.0, 0.6, 0.4])
    p = signal_params(sigma_bar=0.0, marks=tuple(Mark(float(i), w) for i, w in enumerate(weights)))
    counts = np.zeros(3)
    for seg in simulate_batch(p, 0.0, 1.0, 50_000, RngStream(5)):
        m = seg.mark[seg.mark >= 0]
        counts += np.bincount(m, minlength=3)
    assert counts.sum() > 90_000
    expected = counts.sum() * weights / weights.sum()
    assert stats.chisquare(counts, expected).pvalue > 0.01


def test_event_times_strictly_increasing_within_horizon():
    p = signal_params(marks=(Mark(1.0, 20.0),))
    for path in simulate_batch(p, 0.0, 0.05, 20, RngStream(2)).paths():
        ts = [t for t, _ in path.events]
        assert np.all(np.diff(ts) > 0)
        assert all(0 < t <= 1.0 for t in ts)
        assert set(ts) <= set(path.times.tolist())


def test_reflected_brownian_half_normal_mean():
    batch = simulate_batch(signal_params(), 0.0, 0.01, 100_000, RngStream(7))
    st = occupation_check(batch)
    assert st.max_skorokhod == 0.0
    assert st.min_y >= 0.0
    assert abs(st.mean_abs - math.sqrt(2 / math.pi)) <= 3 * st.stderr_abs


@pytest.mark.parametrize("y0", [0.0, 0.5])
def test_reflected_brownian_marginal_ks(y0):
    yT = simulate_batch(signal_params(), y0, 0.01, 100_000, RngStream(3)).terminal()
    # reflected Brownian motion from y0 has the law of |y0 + W_T|
    res = stats.kstest(yT, stats.foldnorm(c=y0).cdf)
    crit = 1.628 / math.sqrt(yT.size)  # 1% critical value
    assert res.statistic < crit


def test_projection_scheme_is_biased_at_barrier():
    yT = simulate_batch(signal_params(), 0.0, 0.05, 20_000, RngStream(3), scheme="projection").terminal()
    assert yT.mean() < math.sqrt(2 / math.pi) - 5 * yT.std() / math.sqrt(yT.size)


def test_skorokhod_identity_on_general_model():
    p = fixtures.general()
    st = occupation_check(simulate_batch(p, 0.0, 0.02, 2000, RngStream(4)))
    assert st.max_skorokhod == 0.0 and st.min_y >= p.a
    for path in simulate_batch(p, 0.1, 0.02, 30, RngStream(4)).paths():
        assert np.all(path.dL >= 0)
        assert np.all((path.y - p.a) * path.dL == 0)


def test_zero_noise_batch_is_degenerate():
    p = signal_params(beta=0.5, sigma_bar=0.0)
    st = occupation_check(simulate_batch(p, 0.0, 0.1, 50, RngStream(0)))
    assert st.stderr_abs == 0.0
    assert all(v == pytest.approx(0.5) for v in st.quantiles.values())


def test_bit_exact_reproducibility():
    p = fixtures.dark_pool()

    def collect(rng):
        return [(s.t1.copy(), s.y1.copy(), s.dL.copy(), s.mark.copy()) for s in simulate_batch(p, 0.0, 0.05, 64, rng)]

    a, b = collect(RngStream(9, 2)), collect(RngStream(9, 2))
    assert len(a) == len(b)
    for x, y in zip(a, b):
        for u, v in zip(x, y):
            assert np.array_equal(u, v)
    c = collect(RngStream(9, 3))
    assert not all(np.array_equal(x[1], y[1]) for x, y in zip(a, c))


def test_batch_is_reiterable_with_same_draws():
    batch = simulate_batch(fixtures.dark_pool(), 0.0, 0.1, 16, RngStream(1))
    assert isinstance(batch, PathBatch)
    np.testing.assert_array_equal(batch.terminal(), batch.terminal())


def test_argmin_sampler_matches_exact_law():
    gen = np.random.default_rng(0)
    a1, a2 = 0.5, 1.2
    draws = _sample_argmin(gen, np.full(20_000, a1), np.full(20_000, a2))
    s = np.linspace(0.0, 1.0, 200_001)
    dens = _first_passage_pdf(a1, s) * _first_passage_pdf(a2, 1.0 - s)
    cdf = cumulative_trapezoid(dens, s, initial=0.0)
    cdf /= cdf[-1]
    assert stats.kstest(draws, lambda x: np.interp(x, s, cdf)).pvalue > 0.01


def test_argmin_sampler_degenerate_endpoint():
    out = _sample_argmin(np.random.default_rng(0), np.array([0.0, 1.0]), np.array([1.0, 0.0]))
    np.testing.assert_array_equal(out, [0.0, 1.0])


def test_path_csv_dump(tmp_path):
    p = signal_params(marks=(Mark(1.0, 5.0),))
    path = simulate_path(p, 0.0, 0.1, RngStream(3))
    write_path_csv(path, tmp_path / "p.csv", tmp_path / "e.csv", header_lines=["seed=3"])
    lines = (tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "# seed=3" and lines[1] == "t,y,dL"
    assert len(lines) == 2 + path.times.size
    ev = (tmp_path / "e.csv").read_text().splitlines()
    assert ev[1] == "t,mark" and len(ev) == 2 + len(path.events)
