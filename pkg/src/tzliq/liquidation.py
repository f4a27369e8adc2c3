"""Liquidation strategies run along reflected signal paths.

Between events the inventory follows ``dx = -xi dt``.  For feedback
strategies ``xi = r x`` with ``r = u^p / eta^p`` frozen at the left end of
each segment, so the inventory update ``x <- x exp(-r h)`` is exact for the
frozen rate; TWAP (``xi = x/(T-t)``) is integrated exactly.  At an event
with mark ``i`` the block ``rho_i`` computed from the pre-jump inventory is
executed.

Cost integrals are by default integrated exactly along the frozen-rate
inventory path (``quadrature="exact"``); ``quadrature="left"`` uses plain
left-point quadrature, which is first order and visibly biased at
``dt = 0.01`` near the terminal time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .hjb import ValueSurface, interpolate, lower_envelope, lower_envelope_rate_integral, LADDER_LIMIT
from .model import ModelParams, evaluate
from .pathsim import PathBatch, ReflectedPath, Segment

FEEDBACK_TAGS = ("optimal-feedback", "no-dark-pool-feedback")
TAGS = FEEDBACK_TAGS + ("twap", "custom")


class CoverageError(ValueError):
    pass


@dataclass(frozen=True)
class Strategy:
    """A liquidation rule.

    Feedback tags need ``surface``; ``no-dark-pool-feedback`` should carry the
    surface solved with every ``gamma = inf`` and never sends blocks.
    ``custom`` uses ``rate(t, y, x) -> xi`` and optionally
    ``blocks(t, y, x) -> rho`` with shape ``(n_marks, n)``.
    """

    tag: str
    surface: ValueSurface | None = None
    rate: Callable | None = None
    blocks: Callable | None = None
    name: str | None = None

    def __post_init__(self):
        if self.tag not in TAGS:
            raise ValueError(f"unknown strategy tag {self.tag!r}")
        if self.tag in FEEDBACK_TAGS and self.surface is None:
            raise ValueError(f"{self.tag} needs a value surface")
        if self.tag == "custom" and self.rate is None:
            raise ValueError("custom strategy needs a rate function")

    @property
    def label(self) -> str:
        return self.name or self.tag

    def check_coverage(self, t_cut: float) -> None:
        if self.surface is not None and self.surface.t_max < t_cut - 1e-12:
            raise CoverageError(f"surface covers [0, {self.surface.t_max}] but t_cut = {t_cut}")


def feedback_controls(params: ModelParams, surface: ValueSurface, t, y, x, blocks: bool = True):
    """``xi = u^p x / eta^p`` and ``rho_i = u^p x / (gamma_i^p + u^p)``.

    ``gamma_i = inf`` gives ``rho_i = 0`` and ``gamma_i = 0`` gives ``rho_i = x``.
    Returns ``(xi, rho)`` with ``rho`` of shape ``(n_marks,) + shape``.
    """
    u = interpolate(surface, t, y, clamp_y=True)
    return controls_from_u(params, u, t, y, x, blocks)


def controls_from_u(params: ModelParams, u, t, y, x, blocks: bool = True):
    u = np.asarray(u, dtype=float)
    if np.any(u < 0):
        raise ValueError("negative value-function entry (corrupt surface)")
    p = params.p
    x = np.asarray(x, dtype=float)
    up = u**p
    eta = evaluate(params.eta, t, y)
    xi = up * x / eta**p
    shape = np.broadcast(xi, x).shape
    rho = np.zeros((len(params.marks),) + shape)
    if blocks:
        for i in range(len(params.marks)):
            g = params.gamma(t, y, i)
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                frac = np.where(np.isinf(g), 0.0, np.where(g == 0, 1.0, up / (g**p + up)))
            # u = 0 and gamma = 0 both give 0/0 in the formula; gamma = 0 means free execution
            frac = np.where(np.isnan(frac), 0.0, frac)
            rho[i] = frac * x
    return xi, rho


@dataclass
class _State:
    x: np.ndarray
    impact: np.ndarray
    risk: np.ndarray
    slippage: np.ndarray
    xi_q: np.ndarray  # int |xi|^q over the current segment
    n_blocks: np.ndarray
    decay_exponent: np.ndarray
    decay_margin: np.ndarray
    max_increase: np.ndarray
    x0: np.ndarray
    last_block: np.ndarray


def _rates(params, strategy, T, t, y, x):
    """Frozen rate ``r`` (``xi = r x``) and blocks at ``(t, y, x)``."""
    if strategy.tag in FEEDBACK_TAGS:
        u = interpolate(strategy.surface, t, y, clamp_y=True)
        xi, rho = controls_from_u(params, u, t, y, np.ones_like(x), blocks=strategy.tag == "optimal-feedback")
        return xi, rho * x
    if strategy.tag == "twap":
        return 1.0 / (T - t), np.zeros((len(params.marks),) + np.shape(x))
    xi = np.asarray(strategy.rate(t, y, x), dtype=float) * np.ones_like(x)
    rho = np.zeros((len(params.marks),) + np.shape(x))
    if strategy.blocks is not None:
        rho = np.asarray(strategy.blocks(t, y, x), dtype=float).reshape(rho.shape)
    return xi, rho


def _slip_weight(params, t, y, rho, x, quad_x):
    """``sum_i w_i gamma_i |rho_i|^q`` scaled from ``|x|^q`` to ``quad_x``."""
    q = params.q
    total = np.zeros_like(quad_x)
    for i, m in enumerate(params.marks):
        g = params.gamma(t, y, i)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(x > 0, np.abs(rho[i]) / np.where(x > 0, x, 1.0), 0.0)
            term = np.where((rho[i] == 0) | (g == 0), 0.0, m.weight * g * ratio**q)
        total = total + term * quad_x
    return total


def _advance(params, strategy, seg_t0, seg_t1, seg_y0, seg_y1, mark, st: _State, quadrature: str, lower_rate=None):
    """Advance inventory and cost accumulators over one segment (vectorized)."""
    q, T = params.q, params.T
    h = seg_t1 - seg_t0
    x = st.x
    xabs = np.abs(x)
    t, y = seg_t0, seg_y0
    eta = evaluate(params.eta, t, y)
    lam = evaluate(params.lam, t, y)
    if strategy.tag == "custom":
        xi, rho = _rates(params, strategy, T, t, y, x)
        x1 = x - xi * h
        int_xq_exact = None
        xi_q = np.abs(xi) ** q * h
        impact_left = eta * np.abs(xi) ** q * h
        impact_exact = impact_left
    else:
        r, rho = _rates(params, strategy, T, t, y, x)
        r = np.broadcast_to(r, x.shape)
        if strategy.tag == "twap":
            ratio = (T - seg_t1) / (T - seg_t0)
            x1 = x * ratio
            int_xq_exact = xabs**q * (T - seg_t0) / (q + 1.0) * (1.0 - ratio ** (q + 1.0))
            xi_q = (xabs / (T - seg_t0)) ** q * h
            impact_exact = eta * xi_q
        else:
            x1 = x * np.exp(-r * h)
            qrh = q * r * h
            with np.errstate(invalid="ignore", divide="ignore"):
                frac = np.where(qrh > 1e-12, -np.expm1(-qrh) / np.where(qrh > 0, q * r, 1.0), h * (1 - 0.5 * qrh))
            int_xq_exact = xabs**q * frac
            xi_q = r**q * int_xq_exact
            impact_exact = eta * xi_q
        impact_left = eta * (r * xabs) ** q * h
    int_xq_left = xabs**q * h
    if quadrature == "exact" and int_xq_exact is not None:
        st.impact += impact_exact
        st.risk += lam * int_xq_exact
        st.slippage += _slip_weight(params, t, y, rho, xabs, int_xq_exact)
    else:
        st.impact += impact_left
        st.risk += lam * int_xq_left
        st.slippage += _slip_weight(params, t, y, rho, xabs, int_xq_left)
    st.xi_q = xi_q
    if lower_rate is not None:
        st.decay_exponent += lower_rate(seg_t0) * h
    # events at t1: blocks from the pre-jump inventory at the event state
    hit = mark >= 0
    st.last_block = np.zeros_like(x1)
    if np.any(hit) and len(params.marks):
        _, rho1 = _rates(params, strategy, T, seg_t1, seg_y1, x1)
        idx = np.flatnonzero(hit)
        block = rho1[mark[idx], idx]
        x1 = x1.copy()
        x1[idx] -= block
        st.last_block[idx] = block
        st.n_blocks[idx] += block != 0
    st.max_increase = np.maximum(st.max_increase, x1 - x)
    st.x = x1
    if lower_rate is not None:
        bound = np.abs(st.x0) * np.exp(-st.decay_exponent)
        st.decay_margin = np.maximum(st.decay_margin, np.abs(x1) - bound)
    return st


@dataclass
class LiquidationRun:
    path: ReflectedPath
    times: np.ndarray
    y: np.ndarray
    x: np.ndarray
    xi: np.ndarray
    cost_impact: np.ndarray  # cumulative at each node
    cost_risk: np.ndarray
    cost_slippage: np.ndarray
    xi_q: np.ndarray  # int |xi|^q over each step (length n_nodes - 1)
    blocks: list[tuple[float, int, float]] = field(default_factory=list)
    strategy: str = ""
    terminal_value: float = math.nan
    q: float = 2.0

    @property
    def total_cost(self) -> float:
        return float(self.cost_impact[-1] + self.cost_risk[-1] + self.cost_slippage[-1])

    @property
    def has_blocks(self) -> bool:
        return any(b != 0 for _, _, b in self.blocks)

    def write_csv(self, fname, events_fname=None, header_lines: Sequence[str] = ()) -> None:
        with open(fname, "w") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            fh.write("t,y,x,xi,cost_impact,cost_risk,cost_slippage\n")
            data = np.column_stack([self.times, self.y, self.x, self.xi, self.cost_impact, self.cost_risk, self.cost_slippage])
            np.savetxt(fh, data, delimiter=",", fmt="%.17g")
        if events_fname is not None:
            with open(events_fname, "w") as fh:
                for line in header_lines:
                    fh.write(f"# {line}\n")
                fh.write("t,mark,block\n")
                for t, m, b in self.blocks:
                    fh.write(f"{t!r},{m},{b!r}\n")


def _truncate_path(path: ReflectedPath, t_cut: float) -> ReflectedPath:
    keep = path.times <= t_cut + 1e-15
    times, y, dL = path.times[keep], path.y[keep], path.dL[keep]
    if times[-1] < t_cut and keep.sum() < path.times.size:
        j = keep.sum()
        w = (t_cut - path.times[j - 1]) / (path.times[j] - path.times[j - 1])
        times = np.append(times, t_cut)
        y = np.append(y, (1 - w) * path.y[j - 1] + w * path.y[j])
        dL = np.append(dL, 0.0)
    events = [(t, m) for t, m in path.events if t <= t_cut]
    return ReflectedPath(times, y, dL, events)


def run_strategy(
    params: ModelParams,
    strategy: Strategy,
    path: ReflectedPath,
    x0: float,
    t_cut: float | None = None,
    quadrature: str = "exact",
) -> LiquidationRun:
    """Run one strategy along one materialized path up to ``t_cut``."""
    t_cut = params.T if t_cut is None else t_cut
    if strategy.tag in FEEDBACK_TAGS + ("twap",) and not t_cut < params.T:
        raise ValueError("feedback and TWAP runs need t_cut < T")
    strategy.check_coverage(t_cut)
    path = _truncate_path(path, t_cut)
    ev = {t: m for t, m in path.events}
    n = path.times.size
    st = _new_state(np.array([float(x0)]))
    xs, xis = [float(x0)], []
    imp, rsk, slp, xiq = [0.0], [0.0], [0.0], []
    blocks = []
    for k in range(n - 1):
        t0, t1 = path.times[k], path.times[k + 1]
        y0_, y1_ = path.y[k], path.y[k + 1]
        mark = np.array([ev.get(t1, -1)], dtype=np.int64)
        xis.append(float(_xi_at(params, strategy, t0, y0_, st.x)[0]))
        _advance(params, strategy, np.array([t0]), np.array([t1]), np.array([y0_]), np.array([y1_]), mark, st, quadrature)
        if mark[0] >= 0:
            blocks.append((float(t1), int(mark[0]), float(st.last_block[0])))
        xs.append(float(st.x[0]))
        imp.append(float(st.impact[0]))
        rsk.append(float(st.risk[0]))
        slp.append(float(st.slippage[0]))
        xiq.append(float(st.xi_q[0]))
    xis.append(float(_xi_at(params, strategy, path.times[-1], path.y[-1], st.x)[0]))
    term = math.nan
    if strategy.surface is not None:
        u_end = float(interpolate(strategy.surface, path.times[-1], path.y[-1], clamp_y=True))
        term = u_end * abs(xs[-1]) ** params.q
    return LiquidationRun(
        path, path.times, path.y, np.array(xs), np.array(xis), np.array(imp), np.array(rsk), np.array(slp),
        np.array(xiq), blocks, strategy.label, term, params.q,
    )


def _xi_at(params, strategy, t, y, x):
    r, _ = _rates(params, strategy, params.T, np.asarray(t, dtype=float), np.asarray(y, dtype=float), x)
    if strategy.tag == "custom":
        return np.broadcast_to(r, x.shape)
    return r * x


def _new_state(x0: np.ndarray) -> _State:
    n = x0.size
    st = _State(
        x=x0.astype(float),
        impact=np.zeros(n),
        risk=np.zeros(n),
        slippage=np.zeros(n),
        xi_q=np.zeros(n),
        n_blocks=np.zeros(n, dtype=np.int64),
        decay_exponent=np.zeros(n),
        decay_margin=np.full(n, -np.inf),
        max_increase=np.full(n, -np.inf),
        x0=x0.astype(float).copy(),
        last_block=np.zeros(n),
    )
    return st


@dataclass
class BatchResult:
    """Per-path totals of one strategy on a path batch."""

    strategy: str
    impact: np.ndarray
    risk: np.ndarray
    slippage: np.ndarray
    terminal_term: np.ndarray
    x_end: np.ndarray
    y_end: np.ndarray
    n_blocks: np.ndarray
    decay_margin: np.ndarray
    max_increase: np.ndarray
    t_cut: float

    @property
    def cost(self) -> np.ndarray:
        return self.impact + self.risk + self.slippage

    @property
    def total(self) -> np.ndarray:
        """Running cost plus the terminal value term ``u(t_cut, y) |x|^q``."""
        return self.cost + np.nan_to_num(self.terminal_term, nan=0.0)

    @property
    def n_paths(self) -> int:
        return int(self.impact.size)


def decay_rate_function(params: ModelParams, surface: ValueSurface) -> Callable:
    """``t -> (lower(t) / Lambda)^p`` for the envelope matching the surface's truncation level."""
    M = surface.meta.get("M_top", math.inf) if surface.truncation_level == LADDER_LIMIT else surface.truncation_level
    p = params.p

    def rate(t):
        return (lower_envelope(params, M, t) / params.Lambda) ** p

    rate.M = M
    return rate


def run_batch(
    params: ModelParams,
    strategies: Mapping[str, Strategy] | Sequence[Strategy],
    batch: PathBatch,
    x0: float,
    t_cut: float | None = None,
    quadrature: str = "exact",
    decay_monitor: bool = False,
    terminal_surface: ValueSurface | None = None,
) -> dict[str, BatchResult]:
    """Run several strategies on the same paths (common random numbers) in one pass.

    The terminal term ``u(t_cut, y) |x|^q`` uses ``terminal_surface`` when
    given (so that baselines are scored as "follow the baseline, then act
    optimally"), else each strategy's own surface.
    """
    if not isinstance(strategies, Mapping):
        strategies = {s.label: s for s in strategies}
    t_cut = float(batch.times[-1]) if t_cut is None else t_cut
    if abs(batch.times[-1] - t_cut) > 1e-12:
        raise ValueError("the batch must end at t_cut (simulate with t_end=t_cut)")
    for s in strategies.values():
        if s.tag in FEEDBACK_TAGS + ("twap",) and not t_cut < params.T:
            raise ValueError("feedback and TWAP runs need t_cut < T")
        s.check_coverage(t_cut)
    n = batch.n_paths
    states = {k: _new_state(np.full(n, float(x0))) for k in strategies}
    rates = {
        k: decay_rate_function(params, s.surface) if decay_monitor and s.surface is not None else None
        for k, s in strategies.items()
    }
    y_end = np.broadcast_to(np.asarray(batch.y0, dtype=float), (n,)).copy()
    for seg in batch:
        for k, s in strategies.items():
            _advance(params, s, seg.t0, seg.t1, seg.y0, seg.y1, seg.mark, states[k], quadrature, rates[k])
        y_end = seg.y1
    out = {}
    for k, s in strategies.items():
        st = states[k]
        term = np.full(n, np.nan)
        surf = terminal_surface if terminal_surface is not None else s.surface
        if surf is not None and n:
            term = interpolate(surf, np.full(n, t_cut), y_end, clamp_y=True) * np.abs(st.x) ** params.q
        out[k] = BatchResult(
            k, st.impact, st.risk, st.slippage, term, st.x, y_end, st.n_blocks, st.decay_margin, st.max_increase, t_cut
        )
    return out


# --------------------------------------------------------------------------
# pathwise checks
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Verdict:
    passed: bool
    worst_margin: float
    detail: dict = field(default_factory=dict)


def decay_bound(params: ModelParams, surface: ValueSurface, run: LiquidationRun, x0: float) -> np.ndarray:
    """``|x0| exp(-sum (lower(t_k)/Lambda)^p h_k)`` on the run's own nodes (left-point, like the run)."""
    rate = decay_rate_function(params, surface)
    h = np.diff(run.times)
    expo = np.concatenate([[0.0], np.cumsum(rate(run.times[:-1]) * h)])
    return abs(x0) * np.exp(-expo)


def decay_bound_exact(params: ModelParams, surface: ValueSurface, t, x0: float) -> np.ndarray:
    """Same envelope with the integral evaluated in closed form."""
    M = decay_rate_function(params, surface).M
    return abs(x0) * np.exp(-lower_envelope_rate_integral(params, M, t))


def terminal_decay_check(
    run: LiquidationRun, params: ModelParams, surface: ValueSurface, rtol: float = 1e-6
) -> Verdict:
    """``|x_t|`` stays below the envelope decay bound at every node."""
    x0 = run.x[0]
    bound = decay_bound(params, surface, run, x0)
    margin = np.abs(run.x) - bound * (1.0 + rtol)
    worst = float(np.max(margin / np.maximum(abs(x0), 1e-300))) if abs(x0) > 0 else float(np.max(np.abs(run.x)))
    return Verdict(worst <= 0.0, worst, {"residual": float(abs(run.x[-1]))})


def residual_decay_check(residuals: Sequence[float]) -> Verdict:
    """Residual inventories for increasing ``t_cut`` must strictly decrease."""
    r = np.asarray(residuals, dtype=float)
    steps = np.diff(r)
    worst = float(np.max(steps)) if steps.size else 0.0
    return Verdict(bool(np.all(steps < 0)), worst, {"residuals": r.tolist()})


def holder_inventory_check(run: LiquidationRun, rtol: float = 1e-9) -> Verdict:
    """``|x_t - x_end|^q <= (t_end - t)^(q-1) int_t^{t_end} |xi|^q`` at every node of a jump-free run."""
    if run.has_blocks:
        raise ValueError("Hölder check needs a run without block executions")
    t, x, q = run.times, run.x, run.q
    tail = np.concatenate([np.cumsum(run.xi_q[::-1])[::-1], [0.0]])
    lhs = np.abs(x - x[-1]) ** q
    rhs = (t[-1] - t) ** (q - 1.0) * tail
    margin = lhs - rhs * (1.0 + rtol) - 1e-300
    scale = max(abs(x[0]) ** q, 1e-300)
    worst = float(np.max(margin) / scale)
    return Verdict(worst <= 0.0, worst, {"min_slack": float(np.min((rhs - lhs)[:-1] / scale)) if t.size > 1 else 0.0})
