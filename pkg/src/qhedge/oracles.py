"""Closed-form reference values and bounds used by tests and the CLI.

Conventions: Phi is the standard normal CDF; a "lognormal with mean x and
log-variance v^2" is x*exp(v*N - v^2/2) for standard normal N.  Derived
constants are pinned by the quadrature/Monte-Carlo script
tests/oracle_derivations.py, which must be run standalone to regenerate
them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from scipy.special import ndtr, ndtri


def std_normal_cdf(z: float) -> float:
    """Standard normal CDF, accurate to well below 1e-12 absolute."""
    return float(ndtr(z))


def lognormal_put(x: float, q: float, v: float) -> float:
    """E[(q - L)^+] for lognormal L with mean x and log-variance v^2.

    Equals q*Phi(h + v/2) - x*Phi(h - v/2) with h = log(q/x)/v; (q - x)^+
    in the degenerate limit v = 0.
    """
    if x <= 0:
        raise ValueError("x must be > 0")
    if q < 0:
        raise ValueError("q must be >= 0")
    if v < 0:
        raise ValueError("v must be >= 0")
    if q == 0.0:
        return 0.0
    if v == 0.0:
        return max(q - x, 0.0)
    h = math.log(q / x) / v
    return q * float(ndtr(h + 0.5 * v)) - x * float(ndtr(h - 0.5 * v))


def lognormal_lower_partial(x: float, p: float, v: float) -> float:
    """E[L; L <= a] at the p-quantile a of the same lognormal: x*Phi(Phi^{-1}(p) - v)."""
    if x <= 0:
        raise ValueError("x must be > 0")
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    if v < 0:
        raise ValueError("v must be >= 0")
    if p == 0.0:
        return 0.0
    if p == 1.0:
        return x
    return x * float(ndtr(float(ndtri(p)) - v))


def bessel_quantile_value(x: float, p: float) -> float:
    """Quantile-hedging value for the radial model with g(x) = x: p*x, any horizon."""
    if x <= 0:
        raise ValueError("x must be > 0")
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    return p * x


def bessel_dual(x: float, q: float) -> float:
    """Dual value for the radial model with g(x) = x: (q - x)^+, any horizon."""
    if x <= 0:
        raise ValueError("x must be > 0")
    if q < 0:
        raise ValueError("q must be >= 0")
    return max(q - x, 0.0)


def _gbm_vol(b: float, s: float, tau: float) -> float:
    if s == 0.0:
        raise ValueError("s must be nonzero")
    if tau <= 0:
        raise ValueError("tau must be > 0")
    theta = b / s
    return abs(s - theta) * math.sqrt(tau)


def gbm_dual(x: float, q: float, b: float, s: float, tau: float) -> float:
    """Dual value E[(q - Z(T)X(T))^+] for constant coefficients, g(x) = x.

    Z(T)X(T) is lognormal with mean x and log-variance (s - theta)^2 tau,
    theta = b/s; the s = theta case degenerates to (q - x)^+.
    """
    return lognormal_put(x, q, _gbm_vol(b, s, tau))


def gbm_quantile_value(x: float, p: float, b: float, s: float, tau: float) -> float:
    """Quantile-hedging value for constant coefficients, g(x) = x.

    Lower partial expectation of the lognormal law of Z(T)X(T) at its
    p-quantile: x*Phi(Phi^{-1}(p) - v), v = |s - theta|*sqrt(tau).
    """
    return lognormal_lower_partial(x, p, _gbm_vol(b, s, tau))


def regularization_bound(q: float, eps: float, horizon: float) -> float:
    """Uniform bound on the regularization gap at level eps over the horizon.

    q * ((1 + Phi(r) - Phi(-r)) * exp(eps^2 T) - 1) with r = eps*sqrt(T).
    Dominates sup over the window [0, q] of the smearing error; value at
    (1, 0.5, 1) is 0.7757107499225921 (pinned by quadrature).
    """
    if q < 0:
        raise ValueError("q must be >= 0")
    if eps < 0:
        raise ValueError("eps must be >= 0")
    if horizon <= 0:
        raise ValueError("horizon must be > 0")
    if q == 0.0 or eps == 0.0:
        return 0.0
    r = eps * math.sqrt(horizon)
    return q * ((1.0 + float(ndtr(r)) - float(ndtr(-r))) * math.exp(eps * eps * horizon) - 1.0)


# Regularized (smeared) closed forms.  Multiplying the threshold q by an
# independent lognormal factor L_eps with log-variance eps^2 tau turns the
# ramp (q - x)^+ into an exchange value between two lognormals, which
# reduces to lognormal_put with the combined log-volatility.

def bessel_dual_smeared(x: float, q: float, eps: float, tau: float) -> float:
    """Regularized dual value for the radial model, g(x) = x: Z(T)X(T) is
    pathwise constant so only the eps-smearing contributes."""
    if tau < 0:
        raise ValueError("tau must be >= 0")
    return lognormal_put(x, q, eps * math.sqrt(tau))


def bessel_primal_smeared(x: float, p: float, eps: float, tau: float) -> float:
    """Regularized value surface for the radial model: x*Phi(Phi^{-1}(p) - eps*sqrt(tau))."""
    if tau < 0:
        raise ValueError("tau must be >= 0")
    return lognormal_lower_partial(x, p, eps * math.sqrt(tau))


def gbm_dual_smeared(x: float, q: float, b: float, s: float, tau: float, eps: float) -> float:
    """Regularized dual value for constant coefficients, g(x) = x: combined
    log-variance ((s - theta)^2 + eps^2) tau."""
    if s == 0.0:
        raise ValueError("s must be nonzero")
    if tau < 0:
        raise ValueError("tau must be >= 0")
    theta = b / s
    v = math.sqrt(((s - theta) ** 2 + eps * eps) * tau)
    return lognormal_put(x, q, v)


def gbm_primal_smeared(x: float, p: float, b: float, s: float, tau: float, eps: float) -> float:
    """Regularized value surface for constant coefficients, g(x) = x."""
    if s == 0.0:
        raise ValueError("s must be nonzero")
    if tau < 0:
        raise ValueError("tau must be >= 0")
    theta = b / s
    v = math.sqrt(((s - theta) ** 2 + eps * eps) * tau)
    return lognormal_lower_partial(x, p, v)


@dataclass(frozen=True)
class OracleResult:
    value: float
    formula_id: str
    inputs: dict


_FORMULAS = {
    "bessel_quantile_value": bessel_quantile_value,
    "bessel_dual": bessel_dual,
    "gbm_dual": gbm_dual,
    "gbm_quantile_value": gbm_quantile_value,
    "regularization_bound": regularization_bound,
    "std_normal_cdf": std_normal_cdf,
    "bessel_dual_smeared": bessel_dual_smeared,
    "bessel_primal_smeared": bessel_primal_smeared,
    "gbm_dual_smeared": gbm_dual_smeared,
    "gbm_primal_smeared": gbm_primal_smeared,
}


def evaluate(formula_id: str, **inputs) -> OracleResult:
    """Evaluate a named closed form, echoing inputs for provenance."""
    try:
        fn = _FORMULAS[formula_id]
    except KeyError:
        raise ValueError(f"unknown formula {formula_id!r}") from None
    value = fn(**inputs)
    if not math.isfinite(value):
        raise ValueError(f"formula {formula_id} returned non-finite value for {inputs}")
    return OracleResult(value=float(value), formula_id=formula_id, inputs=dict(inputs))
