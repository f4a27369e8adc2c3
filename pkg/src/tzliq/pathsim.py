"""Reflected signal paths on ``[a, inf)`` with a Poisson mark stream.

The factor follows ``dy = beta dt + sigma dW + sigma_bar dB + dL`` with local
time ``L`` increasing only when ``y = a``.  Paths are generated in batches,
vectorized over paths, as a stream of :class:`Segment` objects so that
consumers (liquidation runs, Monte Carlo checks) never need to hold whole
trajectories.

Each Euler step is cut at Poisson event times.  Reflection schemes:

``"bridge"`` (default)
    Exact one-step Skorokhod map for frozen coefficients: the minimum of the
    Brownian bridge between the endpoints is sampled, and when it crosses
    the barrier a node is inserted at the argmin, where ``y = a`` and the
    whole local-time increment is booked.  Exact in law for constant
    coefficients, so the reflection itself adds no time-step bias.
``"projection"``
    ``y_new = max(a, y + dy)``, ``dL = max(0, a - y - dy)``.  Weak error of
    order ``sqrt(dt)`` at the barrier.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy.special import erfc, ndtri

from .model import ModelParams, evaluate


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream),))
        return np.random.Generator(np.random.PCG64(ss))


@dataclass
class Segment:
    """One sub-interval ``[t0, t1]`` for every path in a batch.

    ``dL`` is the local time booked at ``t1`` (nonzero only if ``y1 == a``);
    ``mark[i] >= 0`` means an event with that mark index occurs at ``t1``.
    ``at_grid`` is set on the last segment of each Euler step (all paths are
    then at the grid time ``t1``).  Zero-length segments are allowed.
    """

    t0: np.ndarray
    t1: np.ndarray
    y0: np.ndarray
    y1: np.ndarray
    dL: np.ndarray
    mark: np.ndarray
    step: int
    at_grid: bool = False


@dataclass
class ReflectedPath:
    times: np.ndarray
    y: np.ndarray
    dL: np.ndarray
    events: list[tuple[float, int]] = field(default_factory=list)

    @property
    def local_time(self) -> float:
        return float(self.dL.sum())


def euler_grid(T: float, dt: float, t_start: float = 0.0) -> np.ndarray:
    """``t_start, t_start + dt, ...`` up to ``T``; the last step may be short."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    n = int(math.floor((T - t_start) / dt + 1e-9))
    t = t_start + dt * np.arange(n + 1)
    if T - t[-1] > 1e-12 * max(1.0, T):
        t = np.append(t, T)
    t[-1] = T
    return t


def _first_passage_pdf(alpha, t):
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = alpha / np.sqrt(2.0 * np.pi * t**3) * np.exp(-(alpha**2) / (2.0 * t))
    return np.where(t > 0, out, 0.0)


def _sample_argmin(gen: np.random.Generator, a1: np.ndarray, a2: np.ndarray) -> np.ndarray:
    """Location in ``(0, 1)`` of the minimum of a standard Brownian bridge.

    ``a1 = -min`` and ``a2 = end - min``; the density is proportional to
    ``f_a1(s) f_a2(1 - s)`` with ``f`` the first-passage density.  Sampled by
    rejection from the two half-interval first-passage proposals.
    """
    out = np.empty(a1.size)
    todo = np.arange(a1.size)
    s1 = _first_passage_pdf(a1, np.clip(a1**2 / 3.0, 0.5, 1.0))
    s2 = _first_passage_pdf(a2, np.clip(a2**2 / 3.0, 0.5, 1.0))
    w_left = s2 * erfc(a1)
    w_right = s1 * erfc(a2)
    tot = w_left + w_right
    # minimum (numerically) at an endpoint, or both tails negligible
    degenerate = ~(tot > 0) | (np.minimum(a1, a2) < 1e-9)
    out[degenerate] = np.where(a1[degenerate] <= a2[degenerate], 0.0, 1.0)
    todo = todo[~degenerate]
    p_left = np.where(tot > 0, w_left / np.where(tot > 0, tot, 1.0), 0.5)
    for _ in range(10_000):
        if not todo.size:
            break
        u_branch, u_tail, u_acc = gen.random((3, todo.size))
        left = u_branch < p_left[todo]
        alpha = np.where(left, a1[todo], a2[todo])
        tail = 0.5 * erfc(alpha)  # P(N(0,1) < -alpha sqrt 2)
        z = -ndtri(np.maximum(u_tail * tail, 1e-300))
        s = alpha**2 / z**2
        theta = np.where(left, s, 1.0 - s)
        acc = np.where(
            left,
            _first_passage_pdf(a2[todo], 1.0 - theta) / s2[todo],
            _first_passage_pdf(a1[todo], theta) / s1[todo],
        )
        ok = (u_acc < acc) & (theta >= 0) & (theta <= 1)
        out[todo[ok]] = theta[ok]
        todo = todo[~ok]
    else:
        raise RuntimeError("argmin sampler failed to converge")
    return out


def _frozen_coefficients(params: ModelParams, t: np.ndarray, y: np.ndarray):
    b = evaluate(params.beta, t, y)
    s = evaluate(params.sigma, t, y)
    sb = evaluate(params.sigma_bar, t, y)
    return b, s, sb


def _move(params, gen, t0, t1, y, scheme):
    """Advance every path from ``t0`` to ``t1`` (arrays); returns a list of segments' data."""
    n = y.size
    a = params.a
    h = t1 - t0
    b, s, sb = _frozen_coefficients(params, t0, y)
    dw = gen.standard_normal(n)
    db = gen.standard_normal(n)
    sq = np.sqrt(np.maximum(h, 0.0))
    X = b * h + s * sq * dw + sb * sq * db
    zero_dl = np.zeros(n)
    if scheme == "projection":
        yh = y + X
        y1 = np.maximum(a, yh)
        dL = np.maximum(0.0, a - yh)
        return [(t0, t1, y, y1, dL)]

    u = gen.random(n)
    scale = np.sqrt(s * s + sb * sb) * sq
    noisy = scale > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        c = np.where(noisy, X / np.where(noisy, scale, 1.0), 0.0)
        mz = 0.5 * (c - np.sqrt(c * c - 2.0 * np.log(np.maximum(u, 1e-300))))
    m = np.where(noisy, np.minimum(np.minimum(scale * mz, X), 0.0), np.minimum(X, 0.0))
    hit = (y + m < a) & (h > 0)
    theta = np.ones(n)
    split = hit & noisy
    if split.any():
        mzs = m[split] / scale[split]
        cs = X[split] / scale[split]
        theta[split] = _sample_argmin(gen, -mzs, np.maximum(cs - mzs, 0.0))
    tm = np.where(hit, t0 + theta * h, t0)
    tm = np.minimum(tm, t1)
    ym = np.where(hit, a, y)
    dL = np.where(hit, np.maximum(a - (y + m), 0.0), 0.0)
    y1 = np.where(hit, a + (X - m), y + X)
    y1 = np.maximum(y1, a)
    return [(t0, tm, y, ym, dL), (tm, t1, ym, y1, zero_dl)]


def iter_segments(
    params: ModelParams,
    y0,
    times: np.ndarray,
    n_paths: int,
    rng: RngStream,
    scheme: str = "bridge",
) -> Iterator[Segment]:
    """Generate the segment stream for ``n_paths`` paths on the Euler grid ``times``."""
    if scheme not in ("bridge", "projection"):
        raise ValueError(f"unknown reflection scheme {scheme!r}")
    gen = rng.generator()
    y = np.broadcast_to(np.asarray(y0, dtype=float), (n_paths,)).copy()
    if np.any(y < params.a):
        raise ValueError("initial signal below the barrier a")
    mu = params.mu_total
    probs = params.weights / mu if mu > 0 else None
    E = times[0] + (gen.exponential(1.0 / mu, n_paths) if mu > 0 else np.full(n_paths, np.inf))
    no_mark = np.full(n_paths, -1, dtype=np.int64)
    for k in range(times.size - 1):
        s1 = times[k + 1]
        cur = np.full(n_paths, times[k])
        while True:
            stop = np.minimum(E, s1)
            ev = E <= s1
            parts = _move(params, gen, cur, stop, y, scheme)
            marks = no_mark
            if ev.any():
                marks = no_mark.copy()
                idx = np.flatnonzero(ev)
                marks[idx] = gen.choice(len(probs), size=idx.size, p=probs)
                E[idx] += gen.exponential(1.0 / mu, idx.size)
            cur = stop
            done = not np.any(cur < s1)
            for j, (a0, a1, ya, yb, dl) in enumerate(parts):
                last = j == len(parts) - 1
                yield Segment(a0, a1, ya, yb, dl, marks if last else no_mark, k, at_grid=last and done)
            y = parts[-1][3]
            if done:
                break


@dataclass
class PathBatch:
    """Lazily generated, re-iterable batch of reflected paths (same draws on every pass)."""

    params: ModelParams
    y0: float | np.ndarray
    times: np.ndarray
    n_paths: int
    rng: RngStream
    scheme: str = "bridge"

    def __iter__(self) -> Iterator[Segment]:
        return iter_segments(self.params, self.y0, self.times, self.n_paths, self.rng, self.scheme)

    def terminal(self) -> np.ndarray:
        y = np.broadcast_to(np.asarray(self.y0, dtype=float), (self.n_paths,)).copy()
        for seg in self:
            y = seg.y1
        return y

    def paths(self, max_paths: int = 10_000) -> list[ReflectedPath]:
        """Materialize every path (intended for small batches)."""
        if self.n_paths > max_paths:
            raise ValueError(f"refusing to materialize {self.n_paths} paths (> {max_paths})")
        n = self.n_paths
        ts = [[float(self.times[0])] for _ in range(n)]
        ys = [[float(v)] for v in np.broadcast_to(np.asarray(self.y0, dtype=float), (n,))]
        dls = [[0.0] for _ in range(n)]
        evs: list[list[tuple[float, int]]] = [[] for _ in range(n)]
        for seg in self:
            for i in range(n):
                if seg.t1[i] > seg.t0[i]:
                    ts[i].append(float(seg.t1[i]))
                    ys[i].append(float(seg.y1[i]))
                    dls[i].append(float(seg.dL[i]))
                elif seg.dL[i] > 0:  # zero-length step at the barrier (zero noise)
                    dls[i][-1] += float(seg.dL[i])
                if seg.mark[i] >= 0:
                    evs[i].append((float(seg.t1[i]), int(seg.mark[i])))
        return [ReflectedPath(np.array(t), np.array(y), np.array(d), e) for t, y, d, e in zip(ts, ys, dls, evs)]


def simulate_batch(
    params: ModelParams,
    y0,
    dt: float | None,
    n_paths: int,
    rng: RngStream,
    times: Sequence[float] | None = None,
    t_end: float | None = None,
    scheme: str = "bridge",
) -> PathBatch:
    if dt is None and times is None:
        raise ValueError("give dt or times")
    if times is None:
        times = euler_grid(params.T if t_end is None else t_end, dt)
    else:
        times = np.asarray(times, dtype=float)
        if t_end is not None:
            times = times[times < t_end]
            times = np.append(times, t_end)
    if not np.all(np.diff(times) > 0):
        raise ValueError("times must be strictly increasing")
    if np.any(np.asarray(y0) < params.a):
        raise ValueError("initial signal below the barrier a")
    return PathBatch(params, y0, times, int(n_paths), rng, scheme)


def simulate_path(
    params: ModelParams, y0: float, dt: float, rng: RngStream, scheme: str = "bridge", t_end: float | None = None
) -> ReflectedPath:
    if y0 < params.a:
        raise ValueError("y0 must be >= a")
    if not dt > 0:
        raise ValueError("dt must be positive")
    return simulate_batch(params, y0, dt, 1, rng, t_end=t_end, scheme=scheme).paths()[0]


@dataclass(frozen=True)
class OccupationStats:
    max_skorokhod: float
    min_y: float
    mean: float
    mean_abs: float
    stderr_abs: float
    quantiles: dict
    n_paths: int
    event_counts: np.ndarray | None = None


def occupation_check(paths, a: float | None = None, probs=(0.05, 0.25, 0.5, 0.75, 0.95)) -> OccupationStats:
    """Skorokhod identity and terminal-law summaries for a batch or a list of paths."""
    if isinstance(paths, PathBatch):
        a = paths.params.a
        worst, ymin = 0.0, math.inf
        y = np.broadcast_to(np.asarray(paths.y0, dtype=float), (paths.n_paths,)).copy()
        counts = np.zeros(paths.n_paths, dtype=np.int64)
        for seg in paths:
            worst = max(worst, float(np.max((seg.y1 - a) * seg.dL, initial=0.0)))
            ymin = min(ymin, float(np.min(seg.y1, initial=math.inf)))
            counts += seg.mark >= 0
            y = seg.y1
        yT = y
    else:
        paths = list(paths)
        if not paths:
            raise ValueError("empty path set")
        a = 0.0 if a is None else a
        worst = max(float(np.max((p.y - a) * p.dL)) for p in paths)
        ymin = min(float(p.y.min()) for p in paths)
        yT = np.array([p.y[-1] for p in paths])
        counts = np.array([len(p.events) for p in paths])
    n = yT.size
    d = np.abs(yT - a)
    se = float(d.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan
    q = {float(p): float(v) for p, v in zip(probs, np.quantile(yT, probs))} if n else {}
    return OccupationStats(worst, ymin, float(yT.mean()), float(d.mean()), se, q, n, counts)


def write_path_csv(path: ReflectedPath, fname, events_fname=None, header_lines: Sequence[str] = ()) -> None:
    with open(fname, "w") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        fh.write("t,y,dL\n")
        np.savetxt(fh, np.column_stack([path.times, path.y, path.dL]), delimiter=",", fmt="%.17g")
    if events_fname is not None:
        with open(events_fname, "w") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            fh.write("t,mark\n")
            for t, m in path.events:
                fh.write(f"{t!r},{m}\n")
