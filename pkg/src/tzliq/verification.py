"""Monte Carlo checks of the value function and aggregation of property suites.

* :func:`verify_value` checks the dynamic-programming identity
  ``u_0(y0)|x0|^q = E[cost on [0, t_cut]] + E[u_{t_cut}(y) |x_{t_cut}|^q]``
  under the optimal feedback.
* :func:`verify_dominance` compares strategies on common random numbers.
* :func:`verify_feynman_kac` checks
  ``u_t(y) = E[u_tau(y_tau) + int_t^tau H(s, y_s, u_s(y_s)) ds]``.
* :func:`run_property_suites` runs the cheap invariant suites on a catalog.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .hjb import (
    Grid,
    LadderError,
    OrderingError,
    ValueSurface,
    comparison_harness,
    default_tolerance,
    envelope_margins,
    interpolate,
    ode_envelopes,
    scheme_error_estimate,
    solve_ladder,
    solve_truncated,
)
from .liquidation import (
    BatchResult,
    Strategy,
    holder_inventory_check,
    run_batch,
    run_strategy,
)
from .model import Constant, Mark, ModelParams, default_audit_grid, hamiltonian_zeroth, is_space_constant, validate
from .pathsim import RngStream, euler_grid, occupation_check, simulate_batch

REPORT_VERSION = 1


class InsufficientPathsError(ValueError):
    pass


def _mean_se(v: np.ndarray) -> tuple[float, float]:
    n = v.size
    if n == 0:
        return math.nan, math.nan
    m = float(v.mean())
    se = float(v.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return m, se


@dataclass
class CostReport:
    strategy: str
    n_paths: int
    mean_total: float
    mean_impact: float
    mean_risk: float
    mean_slippage: float
    mean_terminal: float
    stderr: float
    reference: float | None = None
    allowance: float = 0.0
    z: float | None = None
    paired_diff: float | None = None
    paired_stderr: float | None = None
    paired_z: float | None = None
    passed: bool | None = None
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "CostReport":
        return cls(**_from_jsonable(d))


@dataclass
class FkReport:
    probes: list[tuple[float, float]]
    tau: float
    left: list[float]
    right: list[float]
    stderr: list[float]
    z: list[float]
    allowance: float
    n_paths: int
    passed: bool
    z_net: list[float] = field(default_factory=list)  # z after removing the allowance

    def to_dict(self) -> dict:
        d = asdict(self)
        d["probes"] = [list(p) for p in self.probes]
        return _jsonable(d)

    @classmethod
    def from_dict(cls, d: dict) -> "FkReport":
        d = _from_jsonable(d)
        d["probes"] = [tuple(p) for p in d["probes"]]
        return cls(**d)


def _jsonable(obj):
    """Floats survive a JSON round trip, including inf/nan (encoded as strings)."""
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        if math.isnan(f) or math.isinf(f):
            return repr(f)
        return f
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _from_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_from_jsonable(v) for v in obj]
    if obj in ("nan", "inf", "-inf"):
        return float(obj)
    return obj


def _cost_report(name: str, res: BatchResult, reference=None) -> CostReport:
    tot = res.total
    m, se = _mean_se(tot)
    return CostReport(
        strategy=name,
        n_paths=res.n_paths,
        mean_total=m,
        mean_impact=float(res.impact.mean()) if res.n_paths else math.nan,
        mean_risk=float(res.risk.mean()) if res.n_paths else math.nan,
        mean_slippage=float(res.slippage.mean()) if res.n_paths else math.nan,
        mean_terminal=float(np.nan_to_num(res.terminal_term, nan=0.0).mean()) if res.n_paths else math.nan,
        stderr=se,
        reference=reference,
    )


def _mc_times(surface: ValueSurface, t_start: float, t_end: float, dt: float) -> np.ndarray:
    """Euler grid on ``[t_start, t_end]`` merged with the surface's time rows inside it."""
    base = euler_grid(t_end, dt, t_start)
    rows = surface.grid.t[(surface.grid.t > t_start) & (surface.grid.t < t_end)]
    t = np.unique(np.concatenate([base, rows]))
    keep = np.concatenate([[True], np.diff(t) > 1e-14])
    return t[keep]


def verify_value(
    params: ModelParams,
    surface: ValueSurface,
    x0: float,
    y0: float,
    n_paths: int,
    t_cut: float,
    dt: float = 0.01,
    seed: int = 0,
    surface_error: float = 0.0,
    halving: bool = True,
    halving_paths: int | None = None,
    n_sigma: float = 3.0,
    envelopes=None,
    max_stderr_rel: float = 0.05,
) -> CostReport:
    """Dynamic-programming identity at the interior horizon ``t_cut``.

    Allowance = ``3 * surface_error * reference`` plus three times the
    noise-corrected change of the estimate under step halving.  The envelope
    pair, if given, is only recorded.  Raises :class:`InsufficientPathsError`
    if the model is stochastic and the standard error exceeds
    ``max_stderr_rel * reference`` (or cannot be estimated from one path).
    """
    ref = float(interpolate(surface, 0.0, y0)) * abs(x0) ** params.q
    opt = Strategy("optimal-feedback", surface)

    def estimate(step, n, stream):
        times = _mc_times(surface, 0.0, t_cut, step)
        batch = simulate_batch(params, y0, None, n, RngStream(seed, stream), times=times)
        return run_batch(params, [opt], batch, x0, t_cut)["optimal-feedback"]

    res = estimate(dt, n_paths, 0)
    rep = _cost_report("optimal-feedback", res, ref)
    weak = 0.0
    if halving and n_paths > 1:
        n_h = halving_paths or n_paths
        fine = estimate(dt / 2, n_h, 1)
        mf, sef = _mean_se(fine.total)
        delta = rep.mean_total - mf
        se_d = math.hypot(rep.stderr, sef)
        weak = max(0.0, abs(delta) - 2.0 * se_d)
        rep.detail.update(halving_delta=delta, halving_stderr=se_d, fine_mean=mf)
    elif n_paths == 1:
        # deterministic model: compare against a halved step directly
        fine = estimate(dt / 2, 1, 1)
        weak = abs(rep.mean_total - float(fine.total.mean()))
        rep.detail.update(halving_delta=rep.mean_total - float(fine.total.mean()))
    rep.allowance = 3.0 * surface_error * abs(ref) + 3.0 * weak
    diff = rep.mean_total - ref
    rep.z = diff / rep.stderr if rep.stderr > 0 else (0.0 if diff == 0 else math.copysign(math.inf, diff))
    if x0 != 0 and not _deterministic(params):
        if n_paths < 2 or rep.stderr > max_stderr_rel * abs(ref):
            raise InsufficientPathsError(
                f"standard error {rep.stderr:.3g} too large for reference {ref:.3g} with {n_paths} paths"
            )
    rep.passed = abs(diff) <= n_sigma * rep.stderr + rep.allowance + 1e-14 * max(1.0, abs(ref))
    if envelopes is not None:
        rep.detail["envelope"] = [float(envelopes.lower(0.0)) * abs(x0) ** params.q, float(envelopes.upper(0.0)) * abs(x0) ** params.q]
    rep.detail.update(t_cut=t_cut, dt=dt, y0=y0, x0=x0)
    return rep


def _deterministic(params: ModelParams) -> bool:
    """Space-constant model whose optimal control never sends dark-pool blocks."""
    if not is_space_constant(params):
        return False
    ts, ys = default_audit_grid(params, n_t=5, n_y=5)
    return all(np.all(np.isinf(params.gamma(ts[:, None], ys[None, :], i))) for i in range(len(params.marks)))


def verify_dominance(
    params: ModelParams,
    surface: ValueSurface,
    strategies: Sequence[Strategy],
    x0: float,
    y0: float,
    n_paths: int,
    t_cut: float,
    dt: float = 0.01,
    seed: int = 0,
    n_sigma: float = 3.0,
) -> list[CostReport]:
    """Score every strategy on one path set; reports sorted by mean total, best first.

    Each report carries the paired difference ``optimal - strategy`` and its
    z-score; ``passed`` means the optimal feedback is not beaten beyond
    ``n_sigma`` paired standard errors.
    """
    opt = Strategy("optimal-feedback", surface)
    strategies = {s.label: s for s in strategies}
    strategies.setdefault(opt.label, opt)
    times = _mc_times(surface, 0.0, t_cut, dt)
    batch = simulate_batch(params, y0, None, n_paths, RngStream(seed, 0), times=times)
    results = run_batch(params, strategies, batch, x0, t_cut, terminal_surface=surface)
    base = results[opt.label].total
    reports = []
    for name, res in results.items():
        rep = _cost_report(name, res)
        d = base - res.total
        md, sed = _mean_se(d)
        rep.paired_diff, rep.paired_stderr = md, sed
        rep.paired_z = md / sed if sed > 0 else 0.0 if md == 0 else math.copysign(math.inf, md)
        rep.passed = bool(md <= n_sigma * sed)
        reports.append(rep)
    reports.sort(key=lambda r: r.mean_total)
    return reports


def _fk_estimate(params, surface, t, y, tau, n_paths, dt, rng):
    times = _mc_times(surface, t, tau, dt)
    batch = simulate_batch(params, y, None, n_paths, rng, times=times)
    integral = np.zeros(n_paths)
    y_end = np.full(n_paths, float(y))

    def F(s, yy):
        u = interpolate(surface, s, yy, clamp_y=True)
        return hamiltonian_zeroth(params, s, yy, u)

    for seg in batch:
        h = seg.t1 - seg.t0
        if not np.any(h > 0):
            y_end = seg.y1
            continue
        integral += 0.5 * h * (F(seg.t0, seg.y0) + F(seg.t1, seg.y1))
        y_end = seg.y1
    return interpolate(surface, np.full(n_paths, tau), y_end, clamp_y=True) + integral


def verify_feynman_kac(
    params: ModelParams,
    surface: ValueSurface,
    probes: Sequence[tuple[float, float]],
    n_paths: int,
    tau: float,
    dt: float = 0.01,
    seed: int = 0,
    surface_error: float = 0.0,
    halving: bool = True,
    halving_paths: int | None = None,
    n_sigma: float = 4.0,
) -> FkReport:
    """Probe-wise comparison of ``u_t(y)`` with its Monte Carlo representation."""
    g = surface.grid
    for t, y in probes:
        if not (g.t[0] <= t <= tau <= g.t[-1]) or not (g.y[0] <= y <= g.y[-1]):
            raise ValueError(f"probe ({t}, {y}) or tau={tau} outside the grid")
    left, right, ses, zs = [], [], [], []
    allowance = 0.0
    for i, (t, y) in enumerate(probes):
        lhs = float(interpolate(surface, t, y))
        if tau == t:
            m, se = lhs, 0.0
        else:
            m, se = _mean_se(_fk_estimate(params, surface, t, y, tau, n_paths, dt, RngStream(seed, 2 * i)))
        if halving and tau > t:
            nh = halving_paths or n_paths
            fine = _fk_estimate(params, surface, t, y, tau, nh, dt / 2, RngStream(seed, 2 * i + 1))
            mf, sef = _mean_se(fine)
            weak = max(0.0, abs(m - mf) - 2.0 * math.hypot(se, sef))
            allowance = max(allowance, 3.0 * weak + 3.0 * surface_error * abs(lhs))
        else:
            allowance = max(allowance, 3.0 * surface_error * abs(lhs))
        left.append(lhs)
        right.append(m)
        ses.append(se)
        zs.append((m - lhs) / se if se > 0 else 0.0 if m == lhs else math.copysign(math.inf, m - lhs))
    tol_q = 1e-12
    passed = all(abs(r - l) <= n_sigma * s + allowance + tol_q * max(1.0, abs(l)) for l, r, s in zip(left, right, ses))
    z_net = []
    for l, r, s in zip(left, right, ses):
        excess = max(0.0, abs(r - l) - allowance - tol_q * max(1.0, abs(l)))
        z_net.append(math.copysign(excess / s, r - l) if s > 0 else (0.0 if excess == 0 else math.copysign(math.inf, r - l)))
    return FkReport(list(map(tuple, probes)), tau, left, right, ses, zs, allowance, n_paths, passed, z_net)


# --------------------------------------------------------------------------
# property suites
# --------------------------------------------------------------------------

SUITES = ("validate", "envelope", "monotonicity", "comparison", "skorokhod", "decay", "holder")


@dataclass
class SuiteResult:
    fixture: str
    suite: str
    statistic: float | None
    tolerance: float | None
    verdict: str  # "pass" | "fail" | "skipped"
    note: str = ""


@dataclass
class SuiteReport:
    results: list[SuiteResult] = field(default_factory=list)
    version: int = REPORT_VERSION
    provenance: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r.verdict != "fail" for r in self.results)

    @property
    def first_failure(self) -> SuiteResult | None:
        return next((r for r in self.results if r.verdict == "fail"), None)

    def to_dict(self) -> dict:
        return _jsonable({"version": self.version, "provenance": self.provenance, "results": [asdict(r) for r in self.results]})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SuiteReport":
        d = _from_jsonable(json.loads(text))
        if d.get("version") != REPORT_VERSION:
            raise ValueError(f"unsupported report version {d.get('version')}")
        return cls([SuiteResult(**r) for r in d["results"]], d["version"], d.get("provenance", {}))

    def summary_csv(self) -> str:
        lines = ["fixture,suite,statistic,tolerance,verdict"]
        for r in self.results:
            lines.append(f"{r.fixture},{r.suite},{r.statistic!r},{r.tolerance!r},{r.verdict}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SuiteSettings:
    y_max: float = 5.0
    n_space: int = 81
    n_time: int = 100
    M_schedule: tuple[float, ...] = (1.0, 10.0, 100.0, 1000.0)
    n_paths: int = 200
    dt: float = 0.02
    t_cut: float = 0.9
    seed: int = 0


def _raised_lambda(params: ModelParams) -> ModelParams:
    return params.replace(lam=Constant(params.Lambda))


def no_dark_pool_params(params: ModelParams) -> ModelParams:
    return params.replace(marks=tuple(Mark(m.z, m.weight, Constant(math.inf)) for m in params.marks))


def run_property_suites(
    catalog: Mapping[str, ModelParams], settings: SuiteSettings | None = None, suites: Sequence[str] = SUITES
) -> SuiteReport:
    """Run the invariant suites per fixture; a failed ``validate`` skips the rest."""
    s = settings or SuiteSettings()
    report = SuiteReport()
    for name, params in catalog.items():
        out = report.results
        bad = validate(params, *default_audit_grid(params))
        out.append(SuiteResult(name, "validate", float(len(bad)), 0.0, "fail" if bad else "pass",
                               str(bad[0]) if bad else ""))
        if bad:
            out.extend(SuiteResult(name, x, None, None, "skipped", "validate failed") for x in suites if x != "validate")
            continue
        grid = Grid.build(params.a, params.a + s.y_max, s.n_space, params.T, s.n_time)
        err = scheme_error_estimate(params, grid, max(s.M_schedule))
        tau = default_tolerance(err)
        # Monte Carlo consumers see interpolation error as well
        tau_interp = default_tolerance(scheme_error_estimate(params, grid, max(s.M_schedule), interpolated=True))
        ladder = mono = None
        if "monotonicity" in suites or "envelope" in suites:
            try:
                ladder = solve_ladder(params, grid, s.M_schedule, tau_mono=tau)
                mono = SuiteResult(name, "monotonicity", ladder.max_violation, tau, "pass")
            except LadderError as e:
                ladder = e.ladder
                mono = SuiteResult(name, "monotonicity", e.ladder.max_violation, tau, "fail", str(e))
        if "envelope" in suites:
            worst = max(max(envelope_margins(x, ode_envelopes(params, x.truncation_level))) for x in ladder.surfaces)
            out.append(SuiteResult(name, "envelope", worst, tau, "pass" if worst <= tau else "fail"))
        if "monotonicity" in suites:
            out.append(mono)
        if "comparison" in suites:
            try:
                v = comparison_harness(params, _raised_lambda(params), grid, s.M_schedule[-1], tau_mono=tau)
                out.append(SuiteResult(name, "comparison", v.max_violation, v.tolerance, "pass" if v.passed else "fail"))
            except OrderingError as e:
                out.append(SuiteResult(name, "comparison", None, None, "fail", f"ordering: {e}"))
        top = ladder.final if ladder else solve_truncated(params, grid, s.M_schedule[-1])
        times = _mc_times(top, 0.0, s.t_cut, s.dt)
        batch = simulate_batch(params, params.a, None, s.n_paths, RngStream(s.seed, 0), times=times)
        if "skorokhod" in suites:
            occ = occupation_check(batch)
            ok = occ.max_skorokhod == 0.0 and occ.min_y >= params.a
            out.append(SuiteResult(name, "skorokhod", occ.max_skorokhod, 0.0, "pass" if ok else "fail"))
        if "decay" in suites:
            res = run_batch(params, [Strategy("optimal-feedback", top)], batch, 1.0, s.t_cut, decay_monitor=True)
            worst = float(np.max(res["optimal-feedback"].decay_margin))
            tol = tau_interp
            out.append(SuiteResult(name, "decay", worst, tol, "pass" if worst <= tol else "fail"))
        if "holder" in suites:
            small = simulate_batch(params, params.a, None, 5, RngStream(s.seed, 1), times=times).paths()
            ndp = solve_truncated(no_dark_pool_params(params), grid, s.M_schedule[-1])
            worst = -math.inf
            for path in small:
                for strat in (Strategy("twap"), Strategy("no-dark-pool-feedback", ndp)):
                    run = run_strategy(params, strat, path, 1.0, s.t_cut)
                    worst = max(worst, holder_inventory_check(run).worst_margin)
            out.append(SuiteResult(name, "holder", worst, 0.0, "pass" if worst <= 0 else "fail"))
    return report
