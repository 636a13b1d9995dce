"""Synthetic data laws with known regression functions.

Covariates are always uniform on [0,1]^p.  Regression generators produce
y = f(x) + noise * standard normal; the classification generator draws
Bernoulli labels whose success probability has a linear logit, so the exact
optimum of each loss is available in closed form through the loss's link.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .domain import EmpiricalDistribution
from .errors import ConfigError
from .losses import bayes_predictor
from .trees import derive_rng

GENERATORS = ("linear", "product", "additive-sine", "step", "bernoulli-logit")

# Logit slope/offset of the classification generator: p(x) = expit of
# 4*(x_1 - 1/2), symmetric around 1/2 and bounded away from {0,1}.
_LOGIT_SCALE = 4.0


@dataclass(frozen=True)
class GeneratorSpec:
    """Named data law: generator name, dimension, regression noise level."""

    name: str
    dim: int
    noise: float = 0.0

    def __post_init__(self):
        if self.name not in GENERATORS:
            raise ConfigError(f"unknown generator {self.name!r}; choose from {GENERATORS}")
        if self.dim < 1:
            raise ConfigError(f"dim must be >= 1, got {self.dim}")
        if not np.isfinite(self.noise) or self.noise < 0:
            raise ConfigError(f"noise must be finite and >= 0, got {self.noise}")

    @property
    def classification(self) -> bool:
        return self.name == "bernoulli-logit"


def truth(spec: GeneratorSpec):
    """The regression function x -> E[y | x] of the law, as a batch callable.

    For the classification generator this is the success probability.
    """
    name = spec.name

    def f(X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != spec.dim:
            raise ConfigError(f"expected points of dimension {spec.dim}, got shape {X.shape}")
        if name == "linear":
            return X[:, 0].copy()
        if name == "product":
            return np.prod(X, axis=1)
        if name == "additive-sine":
            return np.sum(np.sin(2 * np.pi * X) / 2 + X, axis=1)
        if name == "step":
            return (X[:, 0] > 0.5).astype(np.float64)
        return expit(_LOGIT_SCALE * (X[:, 0] - 0.5))

    return f


def bayes_target(spec: GeneratorSpec, kind: str):
    """The loss-specific population optimum as a batch callable.

    Regression generators paired with squared loss give the regression
    function itself; the classification generator composes its success
    probability with the loss's link.
    """
    if spec.classification:
        return bayes_predictor(kind, truth(spec))
    if kind != "l2":
        raise ConfigError(f"generator {spec.name!r} produces regression targets; loss {kind!r} needs labels")
    return truth(spec)


def generate_dataset(spec: GeneratorSpec, n: int, seed: int,
                     key: tuple = ()) -> EmpiricalDistribution:
    """Draw n points of the law, deterministically in (seed, key).

    Covariates are drawn first, then noise or labels, so datasets with the
    same (seed, key) share covariates across noise levels.
    """
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    rng = derive_rng(seed, *key)
    X = rng.random((n, spec.dim))
    f = truth(spec)(X)
    if spec.classification:
        y = (rng.random(n) < f).astype(np.float64)
    elif spec.noise > 0:
        y = f + spec.noise * rng.standard_normal(n)
    else:
        y = f
    return EmpiricalDistribution(X, y)


def relabel_pm1(dist: EmpiricalDistribution) -> EmpiricalDistribution:
    """Map {0,1} labels to {-1,+1} for losses that want sign labels."""
    y = dist.y
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ConfigError("labels are not {0,1}")
    return EmpiricalDistribution(dist.X, 2.0 * y - 1.0)
