"""Finite-difference solver for the truncated Neumann value equation.

The unknown ``u(t, y)`` solves, backward from ``u(T, .) = M``,

    du/dt + alpha D^2 u + beta D u + H(t, y, u) = 0,   Du(t, a) = 0,

where ``H`` is :func:`tzliq.model.hamiltonian_zeroth`.  Solutions for an
increasing schedule of terminal levels ``M`` form a monotone ladder whose
limit is the singular-terminal value function.

Two time schemes are provided:

``"strang"`` (default)
    Strang splitting.  The reaction ``H`` is integrated pointwise with RK4
    over half steps (substeps chosen from the local stiffness ``|dH/du|``);
    diffusion/advection uses Crank-Nicolson, with the first
    ``rannacher_steps`` steps fully implicit.  Second order in time.
``"imex"``
    One tridiagonal solve per step: diffusion, advection and the
    linearized power term ``u_old^{p} u_new / (p eta^p)`` implicit, the
    source, decay and block terms explicit.  First order in time.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import CubicHermiteSpline
from scipy.linalg import solve_banded

from .model import (
    ModelParams,
    alpha,
    block_term,
    evaluate,
    hamiltonian_zeroth_du,
    power_term,
    validate,
)

log = logging.getLogger(__name__)

SURFACE_FORMAT_VERSION = 1


class SolverError(RuntimeError):
    """Numerical failure inside a solve (too-coarse grid, negative values)."""


class LadderError(RuntimeError):
    """The truncation ladder is non-monotone or has not converged."""

    def __init__(self, message, ladder=None):
        super().__init__(message)
        self.ladder = ladder


class EnvelopeViolation(RuntimeError):
    pass


class OrderingError(ValueError):
    """Coefficient ordering required by the comparison harness does not hold."""


# --------------------------------------------------------------------------
# grids
# --------------------------------------------------------------------------


def time_grid(T: float, n_steps: int, layer_steps: int = 0, layer_ratio: float = 1.2) -> np.ndarray:
    """Times ``0 = t_0 < ... < t_K = T`` with a geometric layer next to ``T``.

    The last ``layer_steps`` steps shrink by ``layer_ratio`` each toward
    ``T``; the remaining steps are uniform and equal to the coarsest layer
    step.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be positive")
    layer_steps = int(min(max(layer_steps, 0), n_steps - 1))
    n_uniform = n_steps - layer_steps
    r = float(layer_ratio)
    if layer_steps and r > 1.0:
        width = (1.0 - r ** (-layer_steps)) / (r - 1.0)
        du = T / (n_uniform + width)
        layer = du * r ** -np.arange(1.0, layer_steps + 1.0)  # moving toward T
        steps = np.concatenate([np.full(n_uniform, du), layer])
    else:
        steps = np.full(n_steps, T / n_steps)
    t = np.concatenate([[0.0], np.cumsum(steps)])
    t[-1] = T
    if not np.all(np.diff(t) > 0):
        raise ValueError("time grid is not strictly increasing; reduce layer_steps or layer_ratio")
    return t


@dataclass(frozen=True)
class Grid:
    y: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        t = np.asarray(self.t, dtype=float)
        if y.size < 3:
            raise ValueError("need at least 3 space nodes")
        if not np.all(np.diff(t) > 0):
            raise ValueError("t grid must be strictly increasing")
        if not y[-1] > y[0]:
            raise ValueError("y_max must exceed a")
        if not np.allclose(np.diff(y), (y[-1] - y[0]) / (y.size - 1), rtol=1e-9, atol=0):
            raise ValueError("space grid must be uniform")
        y.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "t", t)

    @classmethod
    def build(
        cls,
        a: float,
        y_max: float,
        n_space: int,
        T: float,
        n_time: int,
        layer_steps: int | None = None,
        layer_ratio: float = 1.2,
    ) -> "Grid":
        if layer_steps is None:
            layer_steps = n_time // 5
        return cls(np.linspace(a, y_max, n_space), time_grid(T, n_time, layer_steps, layer_ratio))

    @property
    def h(self) -> float:
        return float(self.y[1] - self.y[0])

    @property
    def a(self) -> float:
        return float(self.y[0])

    @property
    def y_max(self) -> float:
        return float(self.y[-1])

    @property
    def n_space(self) -> int:
        return int(self.y.size)

    @property
    def n_time(self) -> int:
        return int(self.t.size - 1)

    def refined(self) -> "Grid":
        """Halve every time step and the space step (coarse nodes are kept)."""
        t = np.empty(2 * self.t.size - 1)
        t[0::2] = self.t
        t[1::2] = 0.5 * (self.t[:-1] + self.t[1:])
        y = np.linspace(self.y[0], self.y[-1], 2 * self.y.size - 1)
        return Grid(y, t)

    def to_dict(self) -> dict:
        return {"y": self.y.tolist(), "t": self.t.tolist()}


# --------------------------------------------------------------------------
# surfaces
# --------------------------------------------------------------------------


LADDER_LIMIT = "ladder-limit"


@dataclass(frozen=True)
class ValueSurface:
    grid: Grid
    values: np.ndarray
    truncation_level: float | str
    boundary_right: str = "neumann"
    neumann: str = "ghost"
    scheme: str = "strang"
    psi_zero: bool = True
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (self.grid.t.size, self.grid.y.size):
            raise ValueError(f"values shape {v.shape} does not match grid")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def t(self) -> np.ndarray:
        return self.grid.t

    @property
    def y(self) -> np.ndarray:
        return self.grid.y

    @property
    def t_max(self) -> float:
        return float(self.grid.t[-1])

    def neumann_residual(self, order: int = 1) -> np.ndarray:
        """Discrete estimate of ``Du(t_k, a)`` per time row.

        ``order=1``: ``(u1 - u0)/h``; ``order=2``: ``(-3u0 + 4u1 - u2)/(2h)``.
        """
        u, h = self.values, self.grid.h
        if order == 1:
            return (u[:, 1] - u[:, 0]) / h
        return (-3.0 * u[:, 0] + 4.0 * u[:, 1] - u[:, 2]) / (2.0 * h)

    def restrict(self, t_cut: float) -> "ValueSurface":
        """Surface on ``[0, t_cut]``; a row at ``t_cut`` is interpolated linearly in time if needed."""
        t = self.grid.t
        if not t[0] <= t_cut <= t[-1]:
            raise ValueError(f"t_cut={t_cut} outside surface time range")
        keep = t <= t_cut
        tk, vk = t[keep], self.values[keep]
        if tk[-1] < t_cut:
            row = interpolate(self, t_cut, self.grid.y)
            tk = np.append(tk, t_cut)
            vk = np.vstack([vk, row])
        return ValueSurface(
            _grid_unchecked(self.grid.y, tk),
            vk,
            self.truncation_level,
            self.boundary_right,
            self.neumann,
            self.scheme,
            self.psi_zero,
            dict(self.meta),
        )


def _grid_unchecked(y, t) -> Grid:
    g = object.__new__(Grid)
    y = np.array(y, dtype=float)
    t = np.array(t, dtype=float)
    y.setflags(write=False)
    t.setflags(write=False)
    object.__setattr__(g, "y", y)
    object.__setattr__(g, "t", t)
    return g


def interpolate(surface: ValueSurface, t, y, clamp_y: bool = False) -> np.ndarray:
    """Interpolation of ``u`` at ``(t, y)``; exact on grid nodes.

    Linear in ``y``.  In ``t`` it is linear as well, unless the surface
    records ``meta["time_power"] = p`` (solver output does), in which case
    ``u^{-p}`` is interpolated linearly, which is exact for the
    ``(T - t)^{-1/p}`` growth of the solution near ``T``.

    Out-of-range queries raise ``ValueError`` unless ``clamp_y`` is set, in
    which case ``y`` is clamped to ``[a, y_max]`` (flat extension matching
    the Neumann boundaries).
    """
    tg, yg, u = surface.grid.t, surface.grid.y, surface.values
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    t, y = np.broadcast_arrays(t, y)
    eps_t = 1e-12 * max(1.0, abs(tg[-1]))
    if np.any(t < tg[0] - eps_t) or np.any(t > tg[-1] + eps_t):
        raise ValueError("time query outside surface range")
    eps_y = 1e-12 * max(1.0, abs(yg[-1]))
    if clamp_y:
        y = np.clip(y, yg[0], yg[-1])
    elif np.any(y < yg[0] - eps_y) or np.any(y > yg[-1] + eps_y):
        raise ValueError("space query outside surface range")
    t = np.clip(t, tg[0], tg[-1])
    y = np.clip(y, yg[0], yg[-1])

    nt = tg.size
    if nt == 1 or tg[-1] == tg[0]:
        k = np.zeros(t.shape, dtype=int)
        wt = np.zeros(t.shape)
        k1 = k
    else:
        k = np.clip(np.searchsorted(tg, t, side="right") - 1, 0, nt - 2)
        k1 = k + 1
        wt = (t - tg[k]) / (tg[k1] - tg[k])
    h = yg[1] - yg[0]
    j = np.clip(np.floor((y - yg[0]) / h).astype(int), 0, yg.size - 2)
    wy = (y - yg[j]) / h
    # exact node hits
    wy = np.where(y == yg[j + 1], 1.0, wy)
    wt = np.where(wt > 1.0, 1.0, wt)
    row0 = u[k, j] * (1.0 - wy) + u[k, j + 1] * wy
    row1 = u[k1, j] * (1.0 - wy) + u[k1, j + 1] * wy
    out = row0 * (1.0 - wt) + row1 * wt
    p = surface.meta.get("time_power")
    if p:
        # linear in u^{-p} along t: exact for the (T-t)^{-1/p} terminal blow-up
        pos = (row0 > 0) & (row1 > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            w = (1.0 - wt) * row0 ** (-p) + wt * row1 ** (-p)
            out = np.where(pos, w ** (-1.0 / p), out)
    out = np.where(wt == 0.0, row0, np.where(wt == 1.0, row1, out))
    return out


def write_surface_csv(surface: ValueSurface, path, header_lines: Sequence[str] = ()) -> None:
    """CSV with header ``t,y,u``, row-major by time then space, full precision."""
    path = Path(path)
    tt, yy = np.meshgrid(surface.grid.t, surface.grid.y, indexing="ij")
    data = np.column_stack([tt.ravel(), yy.ravel(), surface.values.ravel()])
    with path.open("w") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("t,y,u\n")
        np.savetxt(fh, data, delimiter=",", fmt="%.17g")


def read_surface_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    body = np.loadtxt(lines[1:], delimiter=",", ndmin=2)
    t = np.unique(body[:, 0])
    y = np.unique(body[:, 1])
    return t, y, body[:, 2].reshape(t.size, y.size)


def save_surface(surface: ValueSurface, path, provenance: dict | None = None) -> None:
    """Versioned binary cache (``.npz``) with grid metadata."""
    meta = {
        "format_version": SURFACE_FORMAT_VERSION,
        "truncation_level": surface.truncation_level,
        "boundary_right": surface.boundary_right,
        "neumann": surface.neumann,
        "scheme": surface.scheme,
        "psi_zero": surface.psi_zero,
        "meta": surface.meta,
        "provenance": provenance or {},
    }
    with open(path, "wb") as fh:
        np.savez(fh, t=surface.grid.t, y=surface.grid.y, values=surface.values, meta=json.dumps(meta, default=float))


def load_surface(path) -> ValueSurface:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format_version") != SURFACE_FORMAT_VERSION:
            raise ValueError(f"unsupported surface format version {meta.get('format_version')}")
        t, y, values = data["t"], data["y"], data["values"]
    return ValueSurface(
        _grid_unchecked(y, t),
        values,
        meta["truncation_level"],
        meta["boundary_right"],
        meta["neumann"],
        meta["scheme"],
        meta["psi_zero"],
        meta.get("meta", {}),
    )


# --------------------------------------------------------------------------
# envelopes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EnvelopePair:
    lower: Callable[[np.ndarray], np.ndarray]
    upper: Callable[[np.ndarray], np.ndarray]
    M: float


def lower_envelope(params: ModelParams, M: float, t) -> np.ndarray:
    """Closed-form solution with ``(lam, eta, gamma) = (0, kappa0, 0)``.

    For ``mu(Z) = 0`` the exact ``mu -> 0`` limit
    ``(kappa0^p / (M^-p + T - t))^(q-1)`` is returned.
    """
    p, q = params.p, params.q
    tau = params.T - np.asarray(t, dtype=float)
    mu = params.mu_total
    k0p = params.kappa0**p
    inv_mp = 0.0 if math.isinf(M) else (math.inf if M == 0 else M ** (-p))
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        if mu == 0:
            v = k0p / (inv_mp + tau)
        else:
            c = p * k0p * mu
            v = c / ((1.0 + c * inv_mp) * np.exp(p * mu * tau) - 1.0)
    v = np.where(np.isnan(v), 0.0, v)
    if M == 0:
        v = np.zeros_like(tau)
    return v ** (q - 1.0)


def lower_envelope_rate_integral(params: ModelParams, M: float, t) -> np.ndarray:
    """``int_0^t (lower(s) / Lambda)^p ds`` in closed form."""
    p = params.p
    t = np.asarray(t, dtype=float)
    T, mu = params.T, params.mu_total
    k0p = params.kappa0**p
    inv_mp = 0.0 if math.isinf(M) else (math.inf if M == 0 else M ** (-p))
    scale = (params.kappa0 / params.Lambda) ** p
    if M == 0:
        return np.zeros_like(t)
    if mu == 0:
        return scale * np.log((inv_mp + T) / (inv_mp + T - t))
    k = p * mu
    A = 1.0 + p * k0p * mu * inv_mp
    return scale * (np.log((A * math.exp(k * T) - 1.0) / (A * np.exp(k * (T - t)) - 1.0)) - k * t)


def riccati_envelope(
    source: float, eta: float, M: float, params: ModelParams, n_steps: int = 4000
) -> Callable[[np.ndarray], np.ndarray]:
    """RK4 solution of ``-dG/dt = source - G^{q*}/(p eta^p)``, ``G(T) = M``.

    For ``M > 0`` the ODE is integrated in ``W = G^{-p}`` (smooth even for
    ``M = inf``); ``M = 0`` is integrated directly.  The result is a cubic
    Hermite interpolant in ``t`` built from the RK4 nodes and the ODE slopes.
    """
    p, qs, T = params.p, params.q_star, params.T
    tau = np.linspace(0.0, T, n_steps + 1)
    h = tau[1] - tau[0]

    if M > 0:

        def f(w):
            w = max(w, 0.0)
            return eta ** (-p) - p * source * w ** (1.0 + 1.0 / p)

        w = 0.0 if math.isinf(M) else M ** (-p)
        ws = [w]
        for _ in range(n_steps):
            k1 = f(w)
            k2 = f(w + 0.5 * h * k1)
            k3 = f(w + 0.5 * h * k2)
            k4 = f(w + h * k3)
            w = w + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
            ws.append(w)
        ws = np.array(ws)
        dws = np.array([f(x) for x in ws])
        spline = CubicHermiteSpline(tau, ws, dws)

        def G(t):
            tt = params.T - np.asarray(t, dtype=float)
            wv = spline(np.clip(tt, 0.0, T))
            with np.errstate(divide="ignore"):
                return np.where(wv > 0, wv, 0.0) ** (-1.0 / p)

        return G

    def g(x):
        return source - max(x, 0.0) ** qs / (p * eta**p)

    x = 0.0
    xs = [x]
    for _ in range(n_steps):
        k1 = g(x)
        k2 = g(x + 0.5 * h * k1)
        k3 = g(x + 0.5 * h * k2)
        k4 = g(x + h * k3)
        x = x + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        xs.append(x)
    xs = np.array(xs)
    spline = CubicHermiteSpline(tau, xs, np.array([g(v) for v in xs]))
    return lambda t: spline(np.clip(params.T - np.asarray(t, dtype=float), 0.0, T))


def power_envelope(params: ModelParams, M: float, t, Lambda: float | None = None) -> np.ndarray:
    """Closed form ``((T-t)/Lambda^p + M^-p)^(-1/p)`` (the source-free Riccati solution)."""
    lam = params.Lambda if Lambda is None else Lambda
    p = params.p
    inv_mp = 0.0 if math.isinf(M) else M ** (-p)
    tau = params.T - np.asarray(t, dtype=float)
    return (tau / lam**p + inv_mp) ** (-1.0 / p)


def ode_envelopes(params: ModelParams, M: float) -> EnvelopePair:
    """Space-independent lower/upper bounds for the truncated solution ``u^M``."""
    upper = riccati_envelope(params.Lambda, params.Lambda, M, params)
    return EnvelopePair(lambda t: lower_envelope(params, M, t), upper, M)


# --------------------------------------------------------------------------
# solver
# --------------------------------------------------------------------------


def _operator_bands(params: ModelParams, grid: Grid, t: float, neumann: str) -> np.ndarray:
    """Tridiagonal bands (upper, diag, lower) of ``alpha D^2 + beta D``."""
    y, h = grid.y, grid.h
    al = alpha(params, t, y)
    be = evaluate(params.beta, t, y)
    lo = al / h**2 - be / (2 * h)
    di = -2.0 * al / h**2
    up = al / h**2 + be / (2 * h)
    # ghost nodes u[-1] = u[1], u[N+1] = u[N-1]
    up0 = 2.0 * al[0] / h**2
    loN = 2.0 * al[-1] / h**2
    bands = np.zeros((3, y.size))
    bands[0, 1:] = up[:-1]
    bands[1] = di
    bands[2, :-1] = lo[1:]
    bands[0, 1] = up0
    bands[2, -2] = loN
    if neumann == "one_sided":
        # row 0 becomes an algebraic constraint handled by the caller
        bands[1, 0] = 0.0
        bands[0, 1] = 0.0
    return bands


def _apply_bands(bands: np.ndarray, u: np.ndarray) -> np.ndarray:
    out = bands[1] * u
    out[:-1] += bands[0, 1:] * u[1:]
    out[1:] += bands[2, :-1] * u[:-1]
    return out


def _implicit_solve(bands: np.ndarray, coef: float, rhs: np.ndarray, neumann: str, extra_diag=None) -> np.ndarray:
    """Solve ``(I - coef*A + diag(extra)) x = rhs``."""
    ab = -coef * bands
    ab[1] += 1.0
    if extra_diag is not None:
        ab[1] += extra_diag
    rhs = rhs.copy()
    if neumann == "one_sided":
        ab[1, 0], ab[0, 1] = 1.0, -1.0
        rhs[0] = 0.0
    return solve_banded((1, 1), ab, rhs, check_finite=False)


def _reaction(params: ModelParams, t: float, y: np.ndarray, u: np.ndarray, lam, eta, gammas) -> np.ndarray:
    uu = np.maximum(u, 0.0)
    out = lam - power_term(params, eta, uu) - params.mu_total * uu
    for w, g in zip(params.weights, gammas):
        out = out + w * block_term(g, uu, params.q)
    return out


def _reaction_coefs(params: ModelParams, t: float, y: np.ndarray):
    lam = evaluate(params.lam, t, y)
    eta = evaluate(params.eta, t, y)
    gammas = [params.gamma(t, y, i) for i in range(len(params.marks))]
    return lam, eta, gammas


def _reaction_flow(params: ModelParams, y: np.ndarray, u: np.ndarray, t0: float, dt: float, max_sub: int, cfl: float):
    """RK4 flow of ``du/dtau = H(t, y, u)`` over ``t in [t0 - dt, t0]`` (backward in t).

    Substeps are sized from the current stiffness ``max |dH/du|`` so that
    ``h * stiffness <= cfl``; near ``T`` the stiffness collapses as ``u``
    decays from the terminal level, so later substeps grow.
    """
    t, t_end = t0, t0 - dt
    n_sub = 0
    while t > t_end + 1e-15 * max(1.0, abs(t0)):
        stiff = np.max(np.abs(hamiltonian_zeroth_du(params, t, y, np.maximum(u, 0.0))))
        left = t - t_end
        n_left = max(1, int(math.ceil(left * stiff / cfl)))
        h = left / n_left
        n_sub += 1
        if n_sub > max_sub:
            raise SolverError(
                f"reaction step needs more than {max_sub} substeps at t={t0:.6g}; refine the time grid near T"
            )
        tm, t1 = t - 0.5 * h, t - h
        c0 = _reaction_coefs(params, t, y)
        cm = _reaction_coefs(params, tm, y)
        c1 = _reaction_coefs(params, t1, y)
        k1 = _reaction(params, t, y, u, *c0)
        k2 = _reaction(params, tm, y, u + 0.5 * h * k1, *cm)
        k3 = _reaction(params, tm, y, u + 0.5 * h * k2, *cm)
        k4 = _reaction(params, t1, y, u + h * k3, *c1)
        u = u + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        t = t1 if n_left > 1 else t_end
    return u


def solve_truncated(
    params: ModelParams,
    grid: Grid,
    M: float,
    scheme: str = "strang",
    neumann: str = "ghost",
    rannacher_steps: int = 2,
    max_substeps: int = 200_000,
    reaction_cfl: float = 0.1,
    check: bool = True,
) -> ValueSurface:
    """Backward time-stepping of the truncated problem with ``u(T, .) = M``."""
    if check:
        bad = validate(params, grid.t, grid.y)
        if bad:
            raise ValueError(f"model fails validation ({len(bad)} violations), first: {bad[0]}")
    if not M >= 0:
        raise ValueError("terminal level M must be nonnegative")
    if not math.isfinite(M):
        raise ValueError("solve_truncated needs a finite M; use singular_limit for the ladder limit")
    if abs(grid.t[-1] - params.T) > 1e-12 * params.T:
        raise ValueError("time grid must end at T")
    if scheme not in ("strang", "imex"):
        raise ValueError(f"unknown scheme {scheme!r}")
    if neumann not in ("ghost", "one_sided"):
        raise ValueError(f"unknown Neumann treatment {neumann!r}")

    y, t = grid.y, grid.t
    K = t.size - 1
    U = np.empty((K + 1, y.size))
    u = np.full(y.size, float(M))
    U[K] = u
    for step, k in enumerate(range(K, 0, -1)):
        t1, t0 = t[k], t[k - 1]
        dt = t1 - t0
        if scheme == "strang":
            u = _reaction_flow(params, y, u, t1, 0.5 * dt, max_substeps, reaction_cfl)
            bands = _operator_bands(params, grid, 0.5 * (t0 + t1), neumann)
            if step < rannacher_steps:
                u = _implicit_solve(bands, dt, u, neumann)
            else:
                rhs = u + 0.5 * dt * _apply_bands(bands, u)
                u = _implicit_solve(bands, 0.5 * dt, rhs, neumann)
            u = _reaction_flow(params, y, u, t1 - 0.5 * dt, 0.5 * dt, max_substeps, reaction_cfl)
        else:
            lam, eta, gammas = _reaction_coefs(params, t1, y)
            explicit = lam - params.mu_total * u
            for w, g in zip(params.weights, gammas):
                explicit = explicit + w * block_term(g, u, params.q)
            lin = u ** params.p / (params.p * eta ** params.p)
            bands = _operator_bands(params, grid, t0, neumann)
            u = _implicit_solve(bands, dt, u + dt * explicit, neumann, extra_diag=dt * lin)
        if not np.all(np.isfinite(u)):
            raise SolverError(f"non-finite values at t={t0:.6g}")
        if np.any(u < 0):
            raise SolverError(f"negative value {u.min():.3g} produced at t={t0:.6g}; scheme violation")
        U[k - 1] = u
    return ValueSurface(grid, U, float(M), "neumann", neumann, scheme, meta={"time_power": params.p})


def scheme_error_estimate(params: ModelParams, grid: Grid, M: float, interpolated: bool = False, **kw) -> float:
    """Relative sup-error estimate of the solve on ``grid`` from one refinement.

    Uses the Richardson factor for a second-order scheme (``4/3`` of the
    coarse/fine difference) or first order (``2``) for ``imex``.  With
    ``interpolated=True`` the coarse surface is interpolated to every node
    of the refined grid, so the estimate also covers interpolation error
    (the error seen by Monte Carlo consumers).
    """
    coarse = solve_truncated(params, grid, M, **kw)
    fine = solve_truncated(params, grid.refined(), M, **kw)
    factor = 2.0 if kw.get("scheme") == "imex" else 4.0 / 3.0
    if interpolated:
        tt, yy = np.meshgrid(fine.grid.t, fine.grid.y, indexing="ij")
        rows = fine.grid.t < fine.grid.t[-1]
        cv = interpolate(coarse, tt[rows], yy[rows])
        fv = fine.values[rows]
        return float(factor * np.max(np.abs(cv - fv) / np.maximum(np.abs(fv), 1e-300)))
    fv = fine.values[0::2, 0::2]
    diff = np.max(np.abs(coarse.values - fv) / np.maximum(np.abs(fv), 1e-300))
    return float(factor * diff)


def default_tolerance(err: float, floor: float = 1e-10) -> float:
    """``10 x`` the measured scheme error, with a round-off floor."""
    return max(10.0 * err, floor)


@dataclass
class Ladder:
    surfaces: list[ValueSurface]
    tau_mono: float
    max_violation: float

    @property
    def final(self) -> ValueSurface:
        return self.surfaces[-1]

    def gap(self, t_max: float) -> float:
        """Relative sup-gap between the last two rungs on ``t <= t_max``."""
        if len(self.surfaces) < 2:
            return math.nan
        a, b = self.surfaces[-2], self.surfaces[-1]
        rows = a.grid.t <= t_max + 1e-15
        return float(np.max(np.abs(b.values[rows] - a.values[rows]) / np.maximum(b.values[rows], 1e-300)))


def monotonicity_violation(lo: ValueSurface, hi: ValueSurface) -> float:
    """Largest relative amount by which ``lo`` exceeds ``hi``."""
    d = (lo.values - hi.values) / np.maximum(np.abs(hi.values), 1e-300)
    return float(max(0.0, np.max(d)))


def solve_ladder(
    params: ModelParams,
    grid: Grid,
    M_schedule: Sequence[float],
    tau_mono: float | None = None,
    **kw,
) -> Ladder:
    """Solve every rung; rungs must be pointwise nondecreasing in ``M``.

    ``tau_mono`` is a relative tolerance; if omitted it is set from a
    grid-refinement error estimate of the top rung.
    """
    Ms = [float(m) for m in M_schedule]
    if any(b < a for a, b in zip(Ms, Ms[1:])):
        raise ValueError("M_schedule must be nondecreasing")
    surfaces = [solve_truncated(params, grid, M, **kw) for M in Ms]
    if tau_mono is None:
        tau_mono = default_tolerance(scheme_error_estimate(params, grid, Ms[-1], **kw))
    worst = 0.0
    for lo, hi in zip(surfaces, surfaces[1:]):
        worst = max(worst, monotonicity_violation(lo, hi))
    ladder = Ladder(surfaces, tau_mono, worst)
    if worst > tau_mono:
        raise LadderError(f"ladder not monotone: relative violation {worst:.3g} > tau_mono {tau_mono:.3g}", ladder)
    log.info("ladder of %d rungs, monotonicity slack %.3g (tol %.3g)", len(Ms), worst, tau_mono)
    return ladder


def envelope_margins(surface: ValueSurface, env: EnvelopePair, t_max: float | None = None) -> tuple[float, float]:
    """Worst relative envelope violations ``(below lower, above upper)``."""
    t = surface.grid.t
    rows = np.ones(t.size, dtype=bool) if t_max is None else t <= t_max
    lo = env.lower(t[rows])
    up = env.upper(t[rows])
    u = surface.values[rows]
    below = np.max((lo - u.min(axis=1)) / np.maximum(lo, 1e-300))
    above = np.max((u.max(axis=1) - up) / np.maximum(up, 1e-300))
    return float(max(below, 0.0)), float(max(above, 0.0))


def singular_limit(
    params: ModelParams,
    grid: Grid,
    M_schedule: Sequence[float],
    t_cut: float,
    eps_ladder: float = 1e-3,
    tau_env: float | None = None,
    **kw,
) -> ValueSurface:
    """Approximation of the singular-terminal solution on ``[0, t_cut]``.

    Accepted only if the last two rungs agree within ``eps_ladder``
    (relative sup-norm on ``[0, t_cut]``) and the top rung lies inside the
    envelopes computed with the same ``M``.
    """
    if not t_cut < params.T:
        raise ValueError("t_cut must be strictly below T")
    ladder = solve_ladder(params, grid, M_schedule, **kw)
    if len(ladder.surfaces) > 1:
        gap = ladder.gap(t_cut)
        if not gap < eps_ladder:
            raise LadderError(f"ladder not converged on [0, {t_cut}]: gap {gap:.3g} >= {eps_ladder}", ladder)
    else:
        gap = math.nan
    top = ladder.final
    env = ode_envelopes(params, top.truncation_level)
    tol = ladder.tau_mono if tau_env is None else tau_env
    below, above = envelope_margins(top, env)
    if below > tol or above > tol:
        raise EnvelopeViolation(f"envelope violated: below {below:.3g}, above {above:.3g}, tol {tol:.3g}")
    out = top.restrict(t_cut)
    meta = dict(out.meta, M_top=top.truncation_level, ladder_gap=gap, t_cut=t_cut, T=params.T)
    return ValueSurface(out.grid, out.values, LADDER_LIMIT, out.boundary_right, out.neumann, out.scheme, True, meta)


# --------------------------------------------------------------------------
# comparison
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ComparisonVerdict:
    max_violation: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_violation <= self.tolerance


def check_ordering(p1: ModelParams, p2: ModelParams, grid: Grid) -> list[str]:
    """Coefficient conditions under which ``u1 <= u2`` is expected."""
    issues = []
    tt, yy = np.meshgrid(grid.t, grid.y, indexing="ij")
    for name in ("q", "T", "a"):
        if getattr(p1, name) != getattr(p2, name):
            issues.append(f"{name} differs")
    for name in ("beta", "sigma", "sigma_bar"):
        if not np.array_equal(evaluate(getattr(p1, name), tt, yy), evaluate(getattr(p2, name), tt, yy)):
            issues.append(f"{name} differs")
    if not np.array_equal(p1.weights, p2.weights):
        issues.append("mark weights differ")
    if np.any(evaluate(p1.lam, tt, yy) > evaluate(p2.lam, tt, yy)):
        issues.append("lam1 > lam2 somewhere")
    if np.any(evaluate(p1.eta, tt, yy) > evaluate(p2.eta, tt, yy)):
        issues.append("eta1 > eta2 somewhere")
    if len(p1.marks) == len(p2.marks):
        for i in range(len(p1.marks)):
            if np.any(p1.gamma(tt, yy, i) > p2.gamma(tt, yy, i)):
                issues.append(f"gamma1[{i}] > gamma2[{i}] somewhere")
    return issues


def comparison_harness(
    params_1: ModelParams, params_2: ModelParams, grid: Grid, M: float, tau_mono: float | None = None, **kw
) -> ComparisonVerdict:
    """Solve both truncated problems and check ``u1 <= u2`` node by node."""
    issues = check_ordering(params_1, params_2, grid)
    if issues:
        raise OrderingError("; ".join(issues))
    s1 = solve_truncated(params_1, grid, M, **kw)
    s2 = solve_truncated(params_2, grid, M, **kw)
    if tau_mono is None:
        err = max(scheme_error_estimate(params_1, grid, M, **kw), scheme_error_estimate(params_2, grid, M, **kw))
        tau_mono = default_tolerance(err)
    return ComparisonVerdict(monotonicity_violation(s1, s2), tau_mono)
