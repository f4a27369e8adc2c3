"""Model coefficients for target-zone liquidation and their closed-form scalars.

All coefficient functions take ``(t, y)`` and must broadcast over numpy
arrays.  The named families below (``Constant``, ``Affine``, ``Sinusoidal``)
serialize to plain dicts so they can round-trip through a config file; any
other vectorized callable is accepted too but cannot be serialized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

CoefficientFn = Callable[[Any, Any], Any]


class ModelError(ValueError):
    """Raised for structurally invalid model inputs."""


# --------------------------------------------------------------------------
# coefficient families
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Constant:
    value: float

    def __call__(self, t, y):
        return np.full(np.broadcast(np.asarray(t), np.asarray(y)).shape, float(self.value))

    def to_dict(self) -> dict:
        return {"family": "constant", "value": float(self.value)}


@dataclass(frozen=True)
class Affine:
    """``clip(intercept + slope * y, lo, hi)``."""

    intercept: float
    slope: float
    lo: float = -math.inf
    hi: float = math.inf

    def __call__(self, t, y):
        y = np.asarray(y, dtype=float)
        val = np.clip(self.intercept + self.slope * y, self.lo, self.hi)
        return np.broadcast_to(val, np.broadcast(np.asarray(t), y).shape).astype(float)

    def to_dict(self) -> dict:
        return {
            "family": "affine",
            "intercept": float(self.intercept),
            "slope": float(self.slope),
            "lo": float(self.lo),
            "hi": float(self.hi),
        }


@dataclass(frozen=True)
class Sinusoidal:
    """``mean + amplitude * sin(2 pi frequency t + phase)``, constant in y."""

    mean: float
    amplitude: float
    frequency: float = 1.0
    phase: float = 0.0

    def __call__(self, t, y):
        t = np.asarray(t, dtype=float)
        val = self.mean + self.amplitude * np.sin(2.0 * np.pi * self.frequency * t + self.phase)
        return np.broadcast_to(val, np.broadcast(t, np.asarray(y)).shape).astype(float)

    def to_dict(self) -> dict:
        return {
            "family": "sinusoidal",
            "mean": float(self.mean),
            "amplitude": float(self.amplitude),
            "frequency": float(self.frequency),
            "phase": float(self.phase),
        }


_FAMILIES = {"constant": Constant, "affine": Affine, "sinusoidal": Sinusoidal}


def coefficient_from_dict(entry: dict, Lambda: float | None = None):
    """Build a coefficient family from its dict form.

    Affine coefficients without explicit ``lo``/``hi`` are clipped to
    ``[-Lambda, Lambda]``.
    """
    entry = dict(entry)
    family = entry.pop("family", None)
    if family not in _FAMILIES:
        raise ModelError(f"unknown coefficient family {family!r}; expected one of {sorted(_FAMILIES)}")
    if family == "affine" and Lambda is not None:
        entry.setdefault("lo", -Lambda)
        entry.setdefault("hi", Lambda)
    try:
        return _FAMILIES[family](**{k: float(v) for k, v in entry.items()})
    except TypeError as exc:
        raise ModelError(f"bad parameters for {family} coefficient: {exc}") from None


def as_coefficient(obj, Lambda: float | None = None):
    if isinstance(obj, (Constant, Affine, Sinusoidal)):
        return obj
    if isinstance(obj, dict):
        return coefficient_from_dict(obj, Lambda)
    if isinstance(obj, (int, float, np.floating, np.integer)):
        return Constant(float(obj))
    if callable(obj):
        return obj
    raise ModelError(f"cannot interpret {obj!r} as a coefficient")


def coefficient_to_dict(coef) -> dict:
    if hasattr(coef, "to_dict"):
        return coef.to_dict()
    raise ModelError(f"coefficient {coef!r} is an arbitrary callable and cannot be serialized")


def evaluate(coef: CoefficientFn, t, y) -> np.ndarray:
    shape = np.broadcast(np.asarray(t), np.asarray(y)).shape
    return np.broadcast_to(np.asarray(coef(t, y), dtype=float), shape)


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Mark:
    """One atom ``z`` of the mark measure with weight ``mu({z})`` and slippage ``gamma``."""

    z: float
    weight: float
    gamma: CoefficientFn = field(default_factory=lambda: Constant(math.inf))


@dataclass(frozen=True)
class ModelParams:
    q: float
    T: float
    a: float
    beta: CoefficientFn
    sigma: CoefficientFn
    sigma_bar: CoefficientFn
    eta: CoefficientFn
    lam: CoefficientFn
    marks: tuple[Mark, ...] = ()
    Lambda: float = 1.0
    kappa: float = 1.0
    kappa0: float = 1.0

    def __post_init__(self):
        if not self.T > 0:
            raise ModelError(f"horizon T must be positive, got {self.T}")
        object.__setattr__(self, "marks", tuple(self.marks))
        for name in ("beta", "sigma", "sigma_bar", "eta", "lam"):
            object.__setattr__(self, name, as_coefficient(getattr(self, name), self.Lambda))
        marks = []
        for m in self.marks:
            if not (m.weight > 0 and math.isfinite(m.weight)):
                raise ModelError(f"mark weights must be positive and finite, got {m.weight}")
            marks.append(Mark(m.z, float(m.weight), as_coefficient(m.gamma, self.Lambda)))
        object.__setattr__(self, "marks", tuple(marks))

    @property
    def q_star(self) -> float:
        return self.q / (self.q - 1.0)

    @property
    def p(self) -> float:
        """Exponent ``q* - 1 = 1/(q-1)`` used throughout the feedback law."""
        return 1.0 / (self.q - 1.0)

    @property
    def mu_total(self) -> float:
        return float(sum(m.weight for m in self.marks))

    @property
    def weights(self) -> np.ndarray:
        return np.array([m.weight for m in self.marks], dtype=float)

    def gamma(self, t, y, i: int) -> np.ndarray:
        return evaluate(self.marks[i].gamma, t, y)

    def replace(self, **changes) -> "ModelParams":
        from dataclasses import replace

        return replace(self, **changes)


# --------------------------------------------------------------------------
# validation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    kind: str
    t: float
    y: float
    value: float

    def __str__(self):
        return f"{self.kind} at (t={self.t:g}, y={self.y:g}): {self.value:g}"


def default_audit_grid(params: ModelParams, y_span: float = 10.0, n_t: int = 11, n_y: int = 81):
    return np.linspace(0.0, params.T, n_t), params.a + np.linspace(0.0, y_span, n_y)


def validate(
    params: ModelParams,
    t_samples: Sequence[float] | None = None,
    y_samples: Sequence[float] | None = None,
    rtol: float = 1e-12,
) -> list[Violation]:
    """Audit the standing assumptions on a sample grid.

    Returns every violation found; an empty list means all audits pass.  The
    Lipschitz audit compares finite-difference slopes in ``y`` against
    ``Lambda`` and is a sampled check, not a proof.
    """
    if not params.q > 1:
        raise ModelError(f"power q must exceed 1, got {params.q}")
    if t_samples is None or y_samples is None:
        t_def, y_def = default_audit_grid(params)
        t_samples = t_def if t_samples is None else t_samples
        y_samples = y_def if y_samples is None else y_samples
    ts = np.asarray(t_samples, dtype=float)
    ys = np.sort(np.asarray(y_samples, dtype=float))
    tt, yy = np.meshgrid(ts, ys, indexing="ij")

    values = {}
    coefs = {
        "beta": params.beta,
        "sigma": params.sigma,
        "sigma_bar": params.sigma_bar,
        "eta": params.eta,
        "lam": params.lam,
    }
    for i, m in enumerate(params.marks):
        coefs[f"gamma[{i}]"] = m.gamma
    for name, fn in coefs.items():
        try:
            val = np.array(evaluate(fn, tt, yy), dtype=float)
        except Exception as exc:
            raise ModelError(f"coefficient {name} is not evaluable on the audit grid: {exc}") from exc
        if np.isnan(val).any() or (np.isinf(val).any() and not name.startswith("gamma")):
            raise ModelError(f"coefficient {name} returned non-finite values")
        values[name] = val

    lam_bound = params.Lambda * (1 + rtol)
    out: list[Violation] = []

    def flag(kind, mask, vals):
        for i, j in zip(*np.nonzero(mask)):
            out.append(Violation(kind, float(tt[i, j]), float(yy[i, j]), float(vals[i, j])))

    for name in ("beta", "sigma", "sigma_bar", "eta", "lam"):
        flag(f"{name} bound", np.abs(values[name]) > lam_bound, values[name])
    flag("lam sign", values["lam"] < 0, values["lam"])
    flag("eta floor", values["eta"] < params.kappa0 * (1 - rtol), values["eta"])
    flag("superparabolicity", values["sigma_bar"] ** 2 < params.kappa * (1 - rtol), values["sigma_bar"] ** 2)
    for i in range(len(params.marks)):
        g = values[f"gamma[{i}]"]
        flag(f"gamma[{i}] sign", g < 0, g)

    if ys.size > 1:
        dy = np.diff(ys)
        for name, val in values.items():
            with np.errstate(invalid="ignore"):
                slope = np.abs(np.diff(val, axis=1)) / dy
            slope = np.where(np.isnan(slope), 0.0, slope)
            bad = slope > lam_bound
            for i, j in zip(*np.nonzero(bad)):
                out.append(Violation(f"{name} lipschitz", float(ts[i]), float(ys[j]), float(slope[i, j])))
    return out


# --------------------------------------------------------------------------
# closed-form scalars
# --------------------------------------------------------------------------


def alpha(params: ModelParams, t, y) -> np.ndarray:
    """Diffusion coefficient ``(sigma^2 + sigma_bar^2) / 2``."""
    s = evaluate(params.sigma, t, y)
    sb = evaluate(params.sigma_bar, t, y)
    return 0.5 * (s * s + sb * sb)


def theta(params: ModelParams, y) -> np.ndarray:
    """Weight ``1 / (1 + (y - a)^2)``."""
    d = np.asarray(y, dtype=float) - params.a
    return 1.0 / (1.0 + d * d)


def block_term(gamma, u, q: float) -> np.ndarray:
    """``gamma u / (gamma^p + u^p)^(q-1)`` with the limits ``gamma=inf -> u``, ``gamma=0 -> 0``."""
    p = 1.0 / (q - 1.0)
    g, u = np.broadcast_arrays(np.asarray(gamma, dtype=float), np.asarray(u, dtype=float))
    out = np.zeros(g.shape)
    inf = np.isinf(g)
    out[inf] = u[inf]
    fin = ~inf & (g > 0)
    uf = u[fin]
    # u * (1 / (1 + (u/gamma)^p))^(q-1): same value, no underflow for tiny gamma
    with np.errstate(over="ignore"):
        share = 1.0 / (1.0 + (uf / g[fin]) ** p)
    out[fin] = uf * share ** (q - 1.0)
    return out


def block_term_du(gamma, u, q: float) -> np.ndarray:
    """Derivative in ``u`` of :func:`block_term`: ``(gamma^p / (gamma^p + u^p))^q``."""
    p = 1.0 / (q - 1.0)
    g, u = np.broadcast_arrays(np.asarray(gamma, dtype=float), np.asarray(u, dtype=float))
    out = np.zeros(g.shape)
    out[np.isinf(g)] = 1.0
    fin = np.isfinite(g) & (g > 0)
    with np.errstate(over="ignore"):
        share = 1.0 / (1.0 + (u[fin] / g[fin]) ** p)
    out[fin] = share**q
    return out


def power_term(params: ModelParams, eta, u) -> np.ndarray:
    p = params.p
    return np.asarray(u, dtype=float) ** params.q_star / (p * np.asarray(eta, dtype=float) ** p)


def hamiltonian_zeroth(params: ModelParams, t, y, u) -> np.ndarray:
    """Zeroth-order reaction term of the value equation, for ``u >= 0``.

    ``lam - u^{q*}/((q*-1) eta^{q*-1}) - mu(Z) u + sum_i w_i J(gamma_i, u)``
    """
    u = np.asarray(u, dtype=float)
    if np.any(u < 0):
        raise ModelError("hamiltonian_zeroth requires u >= 0")
    lam = evaluate(params.lam, t, y)
    eta = evaluate(params.eta, t, y)
    out = lam - power_term(params, eta, u) - params.mu_total * u
    for i, m in enumerate(params.marks):
        out = out + m.weight * block_term(params.gamma(t, y, i), u, params.q)
    return out


def hamiltonian_zeroth_du(params: ModelParams, t, y, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    eta = evaluate(params.eta, t, y)
    out = -params.q * u**params.p / eta**params.p - params.mu_total
    for i, m in enumerate(params.marks):
        out = out + m.weight * block_term_du(params.gamma(t, y, i), u, params.q)
    return out


def is_space_constant(params: ModelParams, t_samples=None, y_samples=None) -> bool:
    """Sampled check that every coefficient is independent of ``y``."""
    ts, ys = default_audit_grid(params, n_t=5, n_y=21)
    if t_samples is not None:
        ts = np.asarray(t_samples)
    if y_samples is not None:
        ys = np.asarray(y_samples)
    tt, yy = np.meshgrid(ts, ys, indexing="ij")
    fns = [params.beta, params.sigma, params.sigma_bar, params.eta, params.lam] + [m.gamma for m in params.marks]
    for fn in fns:
        v = evaluate(fn, tt, yy)
        ref = v[:, :1]
        same = (v == ref) | (np.isinf(v) & np.isinf(ref))
        if not same.all():
            return False
    return True
