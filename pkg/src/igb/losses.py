"""The three built-in losses with derivatives, Bayes predictors, and the
constant-minimizer initialization.

Kinds are selected by string tag: "l2" (squared error on real responses),
"logloss" (cross-entropy on {0,1} labels), "exp" (exponential margin loss on
{-1,+1} labels).  All formulas are evaluated in numerically stable forms so
flows can push predictions to |z| of a few hundred without spurious overflow.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, logit

from .errors import ConfigError, ConvergenceError, LabelError

SQUARED = "l2"
CROSS_ENTROPY = "logloss"
EXPONENTIAL = "exp"
LOSS_KINDS = (SQUARED, CROSS_ENTROPY, EXPONENTIAL)

# Solver contract for initial_constant.
NEWTON_TOL = 1e-12
NEWTON_MAX_ITER = 100


def _check_kind(kind: str) -> None:
    if kind not in LOSS_KINDS:
        raise ConfigError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")


def check_labels(kind: str, y) -> None:
    """Raise LabelError when responses are outside the loss's label space."""
    _check_kind(kind)
    y = np.asarray(y, dtype=np.float64)
    if kind == SQUARED and not np.all(np.isfinite(y)):
        raise LabelError("squared error expects finite responses")
    if kind == CROSS_ENTROPY and not np.all((y == 0.0) | (y == 1.0)):
        raise LabelError("cross-entropy expects labels in {0,1}")
    if kind == EXPONENTIAL and not np.all((y == -1.0) | (y == 1.0)):
        raise LabelError("exponential loss expects labels in {-1,+1}")


def loss_value(kind: str, y, z):
    _check_kind(kind)
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if kind == SQUARED:
        return 0.5 * (y - z) ** 2
    if kind == CROSS_ENTROPY:
        # -y z + log(1 + e^z), written as logaddexp(0, z) for stability
        return -y * z + np.logaddexp(0.0, z)
    return np.exp(-y * z)


def loss_grad(kind: str, y, z):
    _check_kind(kind)
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if kind == SQUARED:
        return z - y
    if kind == CROSS_ENTROPY:
        return expit(z) - y
    return -y * np.exp(-y * z)


def loss_hess(kind: str, y, z):
    _check_kind(kind)
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if kind == SQUARED:
        return np.ones(np.broadcast(y, z).shape)
    if kind == CROSS_ENTROPY:
        # sigma(z) * (1 - sigma(z)) without cancellation for |z| large
        return expit(z) * expit(-z)
    return np.exp(-y * z)


def initial_constant(kind: str, dist) -> float:
    """Minimizer of z -> mean loss over the sample.

    Newton iteration on the mean gradient with a bisection fallback inside a
    sign-change bracket; converges to |mean gradient| <= 1e-12 within 100
    iterations or raises.  Single-class classification samples have no
    minimizer and are rejected.
    """
    y = dist.y
    check_labels(kind, y)
    if kind == CROSS_ENTROPY and (np.all(y == 0.0) or np.all(y == 1.0)):
        raise LabelError("cross-entropy initialization needs both classes present")
    if kind == EXPONENTIAL and (np.all(y == -1.0) or np.all(y == 1.0)):
        raise LabelError("exponential-loss initialization needs both classes present")

    def phi(z):
        return float(np.mean(loss_grad(kind, y, z)))

    def dphi(z):
        return float(np.mean(loss_hess(kind, y, z)))

    z = 0.0
    f = phi(z)
    if abs(f) <= NEWTON_TOL:
        return z

    # The mean gradient is increasing in z, so expand a bracket [lo, hi]
    # with phi(lo) < 0 < phi(hi) by doubling steps away from 0.
    width = 1.0
    if f > 0:
        hi, fhi = z, f
        lo = z - width
        for _ in range(NEWTON_MAX_ITER):
            flo = phi(lo)
            if flo <= 0:
                break
            hi, fhi = lo, flo
            width *= 2.0
            lo -= width
        else:
            raise ConvergenceError("could not bracket the initialization root")
        if abs(flo) <= NEWTON_TOL:
            return lo
    else:
        lo, flo = z, f
        hi = z + width
        for _ in range(NEWTON_MAX_ITER):
            fhi = phi(hi)
            if fhi >= 0:
                break
            lo, flo = hi, fhi
            width *= 2.0
            hi += width
        else:
            raise ConvergenceError("could not bracket the initialization root")
        if abs(fhi) <= NEWTON_TOL:
            return hi

    z = 0.5 * (lo + hi)
    for _ in range(NEWTON_MAX_ITER):
        f = phi(z)
        if abs(f) <= NEWTON_TOL:
            return z
        if f > 0:
            hi = z
        else:
            lo = z
        d = dphi(z)
        z_new = z - f / d if d > 0 else None
        if z_new is None or not lo < z_new < hi:
            z_new = 0.5 * (lo + hi)
        z = z_new
    raise ConvergenceError(f"initialization Newton did not reach tolerance {NEWTON_TOL}")


def bayes_predictor(kind: str, truth):
    """Optimal predictor from the synthetic ground truth.

    `truth` is the regression function for squared error, or the conditional
    success probability p(x) for the classification losses.  Probabilities
    hitting 0 or 1 have infinite links and are rejected at evaluation time.
    """
    _check_kind(kind)

    def predictor(X):
        X = np.asarray(X, dtype=np.float64)
        vals = np.asarray(truth(X), dtype=np.float64).reshape(-1)
        if kind == SQUARED:
            return vals
        if np.any(vals <= 0.0) or np.any(vals >= 1.0):
            raise LabelError("success probability must lie strictly inside (0,1)")
        link = logit(vals)
        return link if kind == CROSS_ENTROPY else 0.5 * link

    return predictor
