"""Estimators on terminal samples of Z(T) g(X(T)).

The sorted sample array is the empirical distribution; every estimator
here is a closed-form functional of it.  quantile_value implements the
fractional-atom rule: with m = p*n and k = floor(m), the value is
(sum_{i<k} v_i + (m - k) v_k) / n, i.e. the mean of the lowest p-mass with
the boundary order statistic fractionally weighted.  Its standard error
uses the influence function (a - v)^+ - const at the empirical p-quantile
a = v_k, whose sample standard deviation vanishes in the degenerate case.

aux stores the auxiliary Brownian increment B(T) - B(t0) per sample (not a
fixed multiplier), so regularized estimates at any eps reuse the same
draws: common random numbers across an eps study by construction.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import engine
from .errors import BadDistribution, EmptySamples, MissingAux, POutOfRange
from .market import MarketModel, Payoff


@dataclass(frozen=True)
class Estimate:
    value: float
    std_error: float
    n: int


@dataclass(frozen=True)
class SampleSet:
    """Sorted terminal draws of Z(T) g(X(T)) with provenance."""

    values: np.ndarray
    aux: Optional[np.ndarray]
    horizon: float
    seed: int
    scheme: str
    model_name: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = self.values
        if v.ndim != 1 or v.size < 1:
            raise EmptySamples("need a non-empty 1-d value array")
        if not np.all(np.isfinite(v)) or not np.all(v > 0):
            raise ValueError("sample values must be finite and > 0")
        if np.any(np.diff(v) < 0):
            raise ValueError("sample values must be sorted ascending")
        if self.aux is not None and self.aux.shape != v.shape:
            raise ValueError("aux must match values in shape")

    @property
    def n(self) -> int:
        return self.values.size


def sample_set(values, aux=None, *, horizon: float = 1.0, seed: int = 0,
               scheme: str = "external", model_name: str = "external", meta=None) -> SampleSet:
    """Build a SampleSet from raw draws; sorts and keeps aux aligned."""
    v = np.asarray(values, dtype=float).ravel()
    order = np.argsort(v, kind="stable")
    v = v[order].copy()
    a = None
    if aux is not None:
        a = np.asarray(aux, dtype=float).ravel()
        if a.shape != v.shape:
            raise ValueError("aux must match values in shape")
        a = a[order].copy()
        a.flags.writeable = False
    v.flags.writeable = False
    return SampleSet(values=v, aux=a, horizon=float(horizon), seed=int(seed),
                     scheme=scheme, model_name=model_name, meta=dict(meta or {}))


def from_bundle(bundle: engine.PathBundle, payoff: Payoff) -> SampleSet:
    v = bundle.Z[:, -1] * payoff(bundle.X[:, -1, :])
    return sample_set(
        v,
        aux=bundle.aux_total(),
        horizon=bundle.config.horizon,
        seed=bundle.config.seed,
        scheme=bundle.config.scheme,
        model_name=bundle.model_name,
        meta={"n_paths": bundle.n_paths, "n_steps": bundle.n_steps},
    )


def sample_terminal(model: MarketModel, payoff: Payoff, x0, cfg: engine.SimConfig,
                    threads: int = 1) -> SampleSet:
    """Streaming terminal sampler: evolves fixed path blocks (engine.BLOCK)
    keeping only terminal states; thread count never changes the result."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    n = cfg.n_paths
    values = np.empty(n)
    aux = np.empty(n)

    def run_block(args):
        blk, start, bn = args
        X_T, Z_T, B_T = engine.terminal_block(model, x0, cfg, blk, bn)
        values[start : start + bn] = Z_T * payoff(X_T)
        aux[start : start + bn] = B_T

    tasks = list(engine._blocks(n))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_block, tasks))
    else:
        for task in tasks:
            run_block(task)

    return sample_set(
        values,
        aux=aux,
        horizon=cfg.horizon,
        seed=cfg.seed,
        scheme=cfg.scheme,
        model_name=model.name,
        meta={"n_paths": n, "n_steps": cfg.n_steps, "x0": x0.tolist()},
    )


def _prefix_sums(v: np.ndarray):
    s1 = np.zeros(v.size + 1)
    s2 = np.zeros(v.size + 1)
    np.cumsum(v, out=s1[1:])
    np.cumsum(v * v, out=s2[1:])
    return s1, s2


def superhedge_value(samples: SampleSet) -> Estimate:
    """Sample mean of the deflated payoff: the p=1 capital."""
    if samples.n < 2:
        raise EmptySamples("need at least 2 samples for a standard error")
    v = samples.values
    return Estimate(float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size)), v.size)


def quantile_value(samples: SampleSet, p: float) -> Estimate:
    if not 0.0 <= p <= 1.0:
        raise POutOfRange(f"p={p} outside [0, 1]")
    v = samples.values
    n = v.size
    m = p * n
    k = int(np.floor(m))
    if k >= n:
        k = n
    head = float(v[:k].sum())
    if k < n:
        value = (head + (m - k) * v[k]) / n
        a = v[k]
    else:
        value = head / n
        a = v[-1]
    if n < 2:
        return Estimate(float(value), 0.0, n)
    infl = np.maximum(a - v, 0.0)
    se = float(infl.std(ddof=1) / np.sqrt(n))
    return Estimate(float(value), se, n)


def quantile_curve(samples: SampleSet, p_grid=None):
    """Vectorized quantile_value over a p grid via prefix sums.

    Returns (p, value, std_error) arrays.
    """
    if p_grid is None:
        p_grid = default_p_grid()
    p = np.asarray(p_grid, dtype=float)
    if np.any(p < 0) or np.any(p > 1):
        raise POutOfRange("p grid outside [0, 1]")
    v = samples.values
    n = v.size
    s1, s2 = _prefix_sums(v)
    m = p * n
    k = np.minimum(np.floor(m).astype(int), n)
    head = s1[k]
    vk = v[np.minimum(k, n - 1)]
    value = (head + np.where(k < n, (m - k) * vk, 0.0)) / n
    # influence function (a - v)^+ at a = v_k: moments from prefix sums
    a = vk
    tot = k * a - s1[k]
    tot_sq = k * a * a - 2.0 * a * s1[k] + s2[k]
    if n >= 2:
        var = np.maximum(tot_sq - tot * tot / n, 0.0) / (n - 1)
        se = np.sqrt(var / n)
    else:
        se = np.zeros_like(value)
    return p, value, se


def empirical_cdf(samples: SampleSet, a: float) -> float:
    """F(a): fraction of values <= a (right-continuous)."""
    return float(np.searchsorted(samples.values, a, side="right")) / samples.n


def empirical_cdf_left(samples: SampleSet, a: float) -> float:
    """F(a-): fraction of values strictly below a."""
    return float(np.searchsorted(samples.values, a, side="left")) / samples.n


def partial_expectation(samples: SampleSet, q: float, a: float) -> float:
    """Mean of (q - v) over samples with v <= a; maximized over a at a = q,
    where it equals dual_value."""
    if q < 0 or a < 0:
        raise ValueError("q and a must be >= 0")
    v = samples.values
    k = int(np.searchsorted(v, a, side="right"))
    return (k * q - float(v[:k].sum())) / v.size


def dual_value(samples: SampleSet, q: float) -> Estimate:
    """Mean of (q - v)^+ with standard error."""
    if q < 0:
        raise ValueError("q must be >= 0")
    w = np.maximum(q - samples.values, 0.0)
    n = w.size
    se = float(w.std(ddof=1) / np.sqrt(n)) if n >= 2 else 0.0
    return Estimate(float(w.mean()), se, n)


def dual_curve(samples: SampleSet, q_grid=None):
    """Vectorized dual_value over a q grid via prefix sums; (q, value, se)."""
    if q_grid is None:
        q_grid = default_q_grid(samples)
    q = np.asarray(q_grid, dtype=float)
    if np.any(q < 0):
        raise ValueError("q grid must be >= 0")
    v = samples.values
    n = v.size
    s1, s2 = _prefix_sums(v)
    k = np.searchsorted(v, q, side="left")
    tot = k * q - s1[k]
    tot_sq = k * q * q - 2.0 * q * s1[k] + s2[k]
    value = tot / n
    if n >= 2:
        var = np.maximum(tot_sq - tot * tot / n, 0.0) / (n - 1)
        se = np.sqrt(var / n)
    else:
        se = np.zeros_like(value)
    return q, value, se


def _aux_multipliers(samples: SampleSet, eps: float) -> np.ndarray:
    if samples.aux is None:
        raise MissingAux("sample set carries no auxiliary Brownian increments")
    tau = samples.horizon
    return np.exp(-0.5 * eps * eps * tau + eps * samples.aux)


def dual_value_regularized(samples: SampleSet, q: float, eps: float) -> Estimate:
    """Mean of (q L_eps - v)^+ with L_eps = exp(-eps^2 tau/2 + eps (B(T)-B(t0)));
    the same B draws serve every (q, eps), so gaps to dual_value are
    common-random-number estimates."""
    if q < 0:
        raise ValueError("q must be >= 0")
    if eps < 0:
        raise ValueError("eps must be >= 0")
    if eps == 0.0:
        return dual_value(samples, q)
    L = _aux_multipliers(samples, eps)
    w = np.maximum(q * L - samples.values, 0.0)
    n = w.size
    se = float(w.std(ddof=1) / np.sqrt(n)) if n >= 2 else 0.0
    return Estimate(float(w.mean()), se, n)


def neyman_pearson_bruteforce(dist, p: float) -> float:
    """Exact minimum of E[v phi] over randomized tests phi with E[phi] >= p
    on a discrete distribution given as (value, prob) pairs: greedy fill of
    the smallest values with a fractional weight at the marginal atom."""
    arr = np.atleast_2d(np.asarray(dist, dtype=float))
    if arr.shape[1] != 2:
        raise BadDistribution("expected (value, prob) pairs")
    vals, probs = arr[:, 0], arr[:, 1]
    if np.any(probs < -1e-15):
        raise BadDistribution("negative probability")
    total = probs.sum()
    if abs(total - 1.0) > 1e-9:
        raise BadDistribution(f"probabilities sum to {total}, not 1")
    if not 0.0 <= p <= 1.0:
        raise POutOfRange(f"p={p} outside [0, 1]")
    order = np.argsort(vals, kind="stable")
    vals, probs = vals[order], probs[order]
    before = np.cumsum(probs) - probs
    used = np.clip(p - before, 0.0, probs)
    return float(np.dot(used, vals))


def default_p_grid(n: int = 101) -> np.ndarray:
    return np.linspace(0.0, 1.0, n)


def default_q_grid(samples: SampleSet, n: int = 201) -> np.ndarray:
    return np.linspace(0.0, 2.0 * superhedge_value(samples).value, n)
