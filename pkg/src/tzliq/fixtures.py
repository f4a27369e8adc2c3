"""Named parameter sets with known closed-form behaviour, used by tests and the CLI catalog."""

from __future__ import annotations

import math

from .model import Affine, Constant, Mark, ModelParams, Sinusoidal


def oracle() -> ModelParams:
    """lam=0, eta=kappa0=1, gamma=0, one mark of weight 1, q=2, T=1.

    The truncated solution is space-constant and equal to the lower envelope.
    """
    return ModelParams(
        q=2.0, T=1.0, a=0.0, beta=0.0, sigma=0.0, sigma_bar=1.0, eta=1.0, lam=0.0,
        marks=(Mark(1.0, 1.0, Constant(0.0)),),
    )


def gamma_upper() -> ModelParams:
    """lam=eta=Lambda=1 and gamma=inf: the solution follows the upper-envelope ODE."""
    return ModelParams(
        q=2.0, T=1.0, a=0.0, beta=0.0, sigma=0.0, sigma_bar=1.0, eta=1.0, lam=1.0,
        marks=(Mark(1.0, 1.0, Constant(math.inf)),),
    )


def lambda_y() -> ModelParams:
    """Oracle model with a running penalty that grows with the signal, lam = clip(y, 0, 1)."""
    return oracle().replace(lam=Affine(0.0, 1.0, 0.0, 1.0))


def dark_pool() -> ModelParams:
    """Two dark pools with finite slippage and a mild signal-dependent impact."""
    return ModelParams(
        q=2.0, T=1.0, a=0.0, beta=0.2, sigma=0.3, sigma_bar=1.0,
        eta=Affine(0.6, 0.1, 0.5, 1.0), lam=0.5,
        marks=(Mark(1.0, 0.6, Constant(0.5)), Mark(2.0, 0.4, Constant(2.0))),
        Lambda=2.0, kappa=1.0, kappa0=0.5,
    )


def no_dark_pool(params: ModelParams) -> ModelParams:
    """Same model with every dark-pool slippage set to zero cost (gamma = inf, never used optimally)."""
    return params.replace(marks=tuple(Mark(m.z, m.weight, Constant(math.inf)) for m in params.marks))


def general() -> ModelParams:
    """Signal- and time-dependent coefficients with q != 2."""
    return ModelParams(
        q=1.8, T=1.0, a=0.0,
        beta=Affine(-0.2, 0.3, -0.4, 0.4),
        sigma=0.4,
        sigma_bar=Sinusoidal(1.0, 0.1, 1.0, 0.0),
        eta=Affine(0.8, 0.2, 0.6, 1.5),
        lam=Affine(0.2, 0.3, 0.0, 1.0),
        marks=(Mark(1.0, 0.7, Affine(0.6, 0.2, 0.4, 1.5)), Mark(2.0, 0.5, Constant(math.inf))),
        Lambda=2.0, kappa=0.5, kappa0=0.5,
    )


def broken() -> ModelParams:
    """Degenerate signal noise (sigma_bar = 0): fails the superparabolicity audit."""
    return oracle().replace(sigma_bar=0.0)


CATALOG = {
    "oracle": oracle,
    "gamma_upper": gamma_upper,
    "lambda_y": lambda_y,
    "dark_pool": dark_pool,
    "general": general,
}


def get(name: str) -> ModelParams:
    if name == "broken":
        return broken()
    try:
        return CATALOG[name]()
    except KeyError:
        raise KeyError(f"unknown fixture {name!r}; choose from {sorted(CATALOG)}") from None
