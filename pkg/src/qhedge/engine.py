"""Path simulation for X, the deflator Z, and the dual processes Q and Q_eps.

Randomness is counter-based (Philox).  Paths are partitioned into fixed
blocks of BLOCK; block j draws from streams keyed by (seed, j, region),
where the region index separates the driving increments of W, the
auxiliary Brownian motion B, and the bridge normals of the near-zero
guard.  The partition never depends on the thread schedule, so results
are bit-identical under any worker count.

All evolution is in log space: log X by Euler with drift b - diag(a)/2,
log Z with drift -|theta|^2/2 and diffusion -theta'dW on the same W
increments.  Q is derived as q0/Z exactly, and Q_eps from Q by the exact
multiplicative factor exp(-eps^2 (s-t0)/2 + eps (B(s)-B(t0))).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from .errors import Nonfinite, SchemeMismatch
from .market import MarketModel, Payoff

BLOCK = 8192
LOG_FLOOR = -30.0
# Above this magnitude exp() overflows float64; treated as a lost path.
_LOG_LIMIT = 700.0
_MASK64 = (1 << 64) - 1

_REGION_W = 0
_REGION_B = 1
_REGION_BRIDGE = 2

SCHEMES = ("log-euler", "exact-gbm", "exact-bessel3")


def _block_gen(seed: int, block_index: int, region: int) -> np.random.Generator:
    key = np.array([seed & _MASK64, 0], dtype=np.uint64)
    counter = np.array([0, 0, block_index, region], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(counter=counter, key=key))


def _blocks(n_paths: int):
    start = 0
    block_index = 0
    while start < n_paths:
        bn = min(BLOCK, n_paths - start)
        yield block_index, start, bn
        start += bn
        block_index += 1


@dataclass(frozen=True)
class SimConfig:
    t0: float = 0.0
    T: float = 1.0
    n_steps: int = 64
    n_paths: int = 1024
    seed: int = 0
    scheme: str = "log-euler"
    epsilon: float = 0.0

    def __post_init__(self):
        if not self.t0 < self.T:
            raise ValueError(f"need t0 < T, got {self.t0} >= {self.T}")
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")

    @property
    def horizon(self) -> float:
        return self.T - self.t0


@dataclass(frozen=True)
class PathBundle:
    t: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    Q: np.ndarray
    Q_eps: np.ndarray
    dW: Optional[np.ndarray]
    dB: np.ndarray
    model_name: str
    x0: np.ndarray
    q0: float
    config: SimConfig
    n_floor_hits: int = 0

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    @property
    def n_steps(self) -> int:
        return self.X.shape[1] - 1

    @property
    def dim(self) -> int:
        return self.X.shape[2]

    def aux_total(self) -> np.ndarray:
        """B(T) - B(t0) per path."""
        return self.dB.sum(axis=1)

    def to_csv(self, path) -> None:
        """Full path dump; large: n_paths * (n_steps+1) rows."""
        d = self.dim
        header = "path,step,t," + ",".join(f"X_{i + 1}" for i in range(d)) + ",Z,Q,Q_eps"
        n, k1 = self.Z.shape
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for i in range(n):
                for k in range(k1):
                    xs = ",".join("%.17g" % v for v in self.X[i, k])
                    fh.write(
                        "%d,%d,%.17g,%s,%.17g,%.17g,%.17g\n"
                        % (i, k, self.t[k], xs, self.Z[i, k], self.Q[i, k], self.Q_eps[i, k])
                    )


def _freeze(*arrays):
    for a in arrays:
        if a is not None:
            a.flags.writeable = False


def _check_log_range(logX, logZ, what: str):
    bad = ~(
        np.isfinite(logZ).all(axis=tuple(range(1, logZ.ndim)))
        & (np.abs(logZ).max(axis=tuple(range(1, logZ.ndim))) < _LOG_LIMIT)
        & np.isfinite(logX).all(axis=tuple(range(1, logX.ndim)))
        & (np.abs(logX).max(axis=tuple(range(1, logX.ndim))) < _LOG_LIMIT)
    )
    if bad.any():
        idx = int(np.argmax(bad))
        raise Nonfinite(f"{what}: log-space overflow on path {idx}", path_index=idx)


def _gbm_coeffs(model: MarketModel):
    b_vec = np.asarray(model.params["b"], dtype=float)
    s_mat = np.asarray(model.params["s"], dtype=float)
    a_diag = (s_mat * s_mat).sum(axis=1)
    theta = np.linalg.solve(s_mat, b_vec)
    return b_vec, s_mat, a_diag, theta


def _generic_log_euler(model: MarketModel, y0: np.ndarray, dW: np.ndarray, xi: np.ndarray, dt: float):
    """Shared stepper for state-dependent coefficients; y0 (d,), dW and xi
    (m, K, d).  Returns (y (m,K+1,d), lz (m,K+1), n_clamped)."""
    m, nsteps, d = dW.shape
    y = np.empty((m, nsteps + 1, d))
    lz = np.empty((m, nsteps + 1))
    y[:, 0, :] = y0
    lz[:, 0] = 0.0
    half = 0.5 * dt
    bridge_scale = 0.5 * np.sqrt(dt)
    n_clamped = 0

    def one_step(y_cur, e, h):
        nonlocal n_clamped
        x_cur = np.exp(y_cur)
        bv = np.asarray(model.b(x_cur), dtype=float)
        sv = np.asarray(model.s(x_cur), dtype=float)
        a_diag = np.einsum("nij,nij->ni", sv, sv)
        theta = np.linalg.solve(sv, bv[..., None])[..., 0]
        y_new = y_cur + (bv - 0.5 * a_diag) * h + np.einsum("nij,nj->ni", sv, e)
        dlz = -0.5 * (theta * theta).sum(axis=1) * h - np.einsum("ni,ni->n", theta, e)
        low = y_new < LOG_FLOOR
        if low.any():
            n_clamped += int(low.sum())
            y_new = np.where(low, LOG_FLOOR, y_new)
        return y_new, dlz

    for k in range(nsteps):
        yk = y[:, k, :]
        e = dW[:, k, :]
        x_cur = np.exp(yk)
        bv = np.asarray(model.b(x_cur), dtype=float)
        sv = np.asarray(model.s(x_cur), dtype=float)
        a_diag = np.einsum("nij,nij->ni", sv, sv)
        theta = np.linalg.solve(sv, bv[..., None])[..., 0]
        trial = yk + (bv - 0.5 * a_diag) * dt + np.einsum("nij,nj->ni", sv, e)
        dlz = -0.5 * (theta * theta).sum(axis=1) * dt - np.einsum("ni,ni->n", theta, e)
        bad = (trial < LOG_FLOOR).any(axis=1)
        if bad.any():
            eb = e[bad]
            e1 = 0.5 * eb + bridge_scale * xi[bad, k, :]
            e2 = eb - e1
            y1, dlz1 = one_step(yk[bad], e1, half)
            y2, dlz2 = one_step(y1, e2, half)
            trial[bad] = y2
            dlz[bad] = dlz1 + dlz2
        y[:, k + 1, :] = trial
        lz[:, k + 1] = lz[:, k] + dlz
    return y, lz, n_clamped


def _check_scheme(model: MarketModel, scheme: str):
    if scheme == "exact-gbm" and model.kind != "gbm":
        raise SchemeMismatch(f"exact-gbm scheme requires a gbm model, got {model.kind}")
    if scheme == "exact-bessel3" and model.kind != "bessel3":
        raise SchemeMismatch(f"exact-bessel3 scheme requires a bessel3 model, got {model.kind}")


def default_scheme(model: MarketModel) -> str:
    """Exact sampler for the built-in models, log-Euler otherwise."""
    if model.kind == "gbm":
        return "exact-gbm"
    if model.kind == "bessel3":
        return "exact-bessel3"
    return "log-euler"


def simulate(model: MarketModel, x0, q0: float, cfg: SimConfig) -> PathBundle:
    """Joint paths of (X, Z, Q, Q_eps) on n_steps+1 nodes.

    dW is None for the exact-bessel3 scheme: the radial embedding draws a
    3-dimensional Brownian motion, and no 1-dimensional driving increments
    exist for it.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (model.dim,):
        raise ValueError(f"x0 must have shape ({model.dim},)")
    if not np.all(x0 > 0):
        raise ValueError("x0 must be strictly positive")
    if not q0 > 0:
        raise ValueError("q0 must be > 0")
    _check_scheme(model, cfg.scheme)

    n, K, d = cfg.n_paths, cfg.n_steps, model.dim
    dt = cfg.horizon / K
    sq_dt = np.sqrt(dt)
    t = cfg.t0 + dt * np.arange(K + 1)
    t = t.copy()
    t[-1] = cfg.T

    logX = np.empty((n, K + 1, d))
    logZ = np.empty((n, K + 1))
    X_exact: Optional[np.ndarray] = None
    dW_out: Optional[np.ndarray] = None if cfg.scheme == "exact-bessel3" else np.empty((n, K, d))
    dB_out = np.empty((n, K))
    floor_hits = 0

    if cfg.scheme == "exact-bessel3":
        X_exact = np.empty((n, K + 1))

    for blk, start, bn in _blocks(n):
        sl = slice(start, start + bn)
        dB = sq_dt * _block_gen(cfg.seed, blk, _REGION_B).standard_normal((bn, K))
        dB_out[sl] = dB
        gen_w = _block_gen(cfg.seed, blk, _REGION_W)

        if cfg.scheme == "exact-bessel3":
            G = sq_dt * gen_w.standard_normal((bn, K, 3))
            w3 = np.zeros((bn, K + 1, 3))
            np.cumsum(G, axis=1, out=w3[:, 1:, :])
            w3[:, :, 0] += x0[0]
            Xb = np.sqrt((w3 * w3).sum(axis=2))
            X_exact[sl] = Xb
            logX[sl, :, 0] = np.log(Xb)
            logZ[sl] = np.log(x0[0]) - logX[sl, :, 0]
        elif model.kind == "gbm":
            # Constant coefficients: log-Euler has no discretization error,
            # so exact-gbm and log-euler share this path.
            b_vec, s_mat, a_diag, theta = _gbm_coeffs(model)
            dW = sq_dt * gen_w.standard_normal((bn, K, d))
            dW_out[sl] = dW
            incY = (b_vec - 0.5 * a_diag) * dt + dW @ s_mat.T
            incZ = -0.5 * float(theta @ theta) * dt - dW @ theta
            logX[sl, 0, :] = np.log(x0)
            np.cumsum(incY, axis=1, out=logX[sl, 1:, :])
            logX[sl, 1:, :] += np.log(x0)
            logZ[sl, 0] = 0.0
            np.cumsum(incZ, axis=1, out=logZ[sl, 1:])
        elif model.kind == "bessel3":
            dW = sq_dt * gen_w.standard_normal((bn, K, 1))
            dW_out[sl] = dW
            xi = _block_gen(cfg.seed, blk, _REGION_BRIDGE).standard_normal((bn, K))
            y, lz, nc = _kernels.bessel3_log_paths(
                np.full(bn, np.log(x0[0])), dW[:, :, 0], xi, dt, LOG_FLOOR
            )
            floor_hits += nc
            logX[sl, :, 0] = y
            logZ[sl] = lz
        else:
            dW = sq_dt * gen_w.standard_normal((bn, K, d))
            dW_out[sl] = dW
            xi = _block_gen(cfg.seed, blk, _REGION_BRIDGE).standard_normal((bn, K, d))
            y, lz, nc = _generic_log_euler(model, np.log(x0), dW, xi, dt)
            floor_hits += nc
            logX[sl] = y
            logZ[sl] = lz

    _check_log_range(logX, logZ, f"simulate({model.name}, {cfg.scheme})")

    X = np.exp(logX) if X_exact is None else X_exact[:, :, None]
    Z = np.exp(logZ)
    Q = q0 * np.exp(-logZ)
    Bcum = np.zeros((n, K + 1))
    np.cumsum(dB_out, axis=1, out=Bcum[:, 1:])
    eps = cfg.epsilon
    Q_eps = Q * np.exp(-0.5 * eps * eps * (t - cfg.t0)[None, :] + eps * Bcum)

    _freeze(t, X, Z, Q, Q_eps, dW_out, dB_out)
    return PathBundle(
        t=t,
        X=X,
        Z=Z,
        Q=Q,
        Q_eps=Q_eps,
        dW=dW_out,
        dB=dB_out,
        model_name=model.name,
        x0=x0.copy(),
        q0=float(q0),
        config=cfg,
        n_floor_hits=floor_hits,
    )


def exact_bessel3_terminal(x0: float, T: float, n_paths: int, seed: int):
    """Exact terminal draws for the radial model: X(T) = |x0 e1 + G| with G
    3-dimensional N(0, T I); Z(T) = x0 / X(T).  Returns (X, Z)."""
    if not x0 > 0:
        raise ValueError("x0 must be > 0")
    if T < 0:
        raise ValueError("T must be >= 0")
    X = np.empty(n_paths)
    sq = np.sqrt(T)
    for blk, start, bn in _blocks(n_paths):
        G = sq * _block_gen(seed, blk, _REGION_W).standard_normal((bn, 3))
        G[:, 0] += x0
        X[start : start + bn] = np.sqrt((G * G).sum(axis=1))
    Z = x0 / X
    _freeze(X, Z)
    return X, Z


def exact_gbm_terminal(b: float, s: float, x0: float, T: float, n_paths: int, seed: int):
    """Exact lognormal terminal draws, d=1 constant coefficients: same normal
    N drives X(T) = x0 exp((b - s^2/2)T + s sqrt(T) N) and
    Z(T) = exp(-theta sqrt(T) N - theta^2 T / 2), theta = b/s.  Returns (X, Z)."""
    if s == 0.0:
        raise ValueError("s must be nonzero")
    if not x0 > 0:
        raise ValueError("x0 must be > 0")
    if T < 0:
        raise ValueError("T must be >= 0")
    theta = b / s
    sq = np.sqrt(T)
    X = np.empty(n_paths)
    Z = np.empty(n_paths)
    for blk, start, bn in _blocks(n_paths):
        N = _block_gen(seed, blk, _REGION_W).standard_normal(bn)
        sl = slice(start, start + bn)
        X[sl] = x0 * np.exp((b - 0.5 * s * s) * T + s * sq * N)
        Z[sl] = np.exp(-theta * sq * N - 0.5 * theta * theta * T)
    _freeze(X, Z)
    return X, Z


def terminal_block(model: MarketModel, x0: np.ndarray, cfg: SimConfig, block_index: int, bn: int):
    """Terminal state for one path block: (X_T (bn,d), Z_T (bn,), B_T (bn,)).

    Exact schemes draw the terminal law in one shot; log-Euler steps through
    the same per-block streams as simulate().  Used by the streaming sampler.
    """
    _check_scheme(model, cfg.scheme)
    K, d = cfg.n_steps, model.dim
    tau = cfg.horizon
    dt = tau / K
    sq_dt = np.sqrt(dt)
    gen_w = _block_gen(cfg.seed, block_index, _REGION_W)

    if cfg.scheme == "exact-bessel3":
        G = np.sqrt(tau) * gen_w.standard_normal((bn, 3))
        G[:, 0] += x0[0]
        X_T = np.sqrt((G * G).sum(axis=1))[:, None]
        Z_T = x0[0] / X_T[:, 0]
        B_T = np.sqrt(tau) * _block_gen(cfg.seed, block_index, _REGION_B).standard_normal(bn)
        return X_T, Z_T, B_T

    if cfg.scheme == "exact-gbm":
        b_vec, s_mat, a_diag, theta = _gbm_coeffs(model)
        W = np.sqrt(tau) * gen_w.standard_normal((bn, d))
        logX = np.log(x0) + (b_vec - 0.5 * a_diag) * tau + W @ s_mat.T
        logZ = -0.5 * float(theta @ theta) * tau - W @ theta
        _check_log_range(logX, logZ, f"terminal_block({model.name}, exact-gbm)")
        B_T = np.sqrt(tau) * _block_gen(cfg.seed, block_index, _REGION_B).standard_normal(bn)
        return np.exp(logX), np.exp(logZ), B_T

    # log-Euler terminal: consume the same stepped streams as simulate().
    dB = sq_dt * _block_gen(cfg.seed, block_index, _REGION_B).standard_normal((bn, K))
    B_T = dB.sum(axis=1)
    if model.kind == "gbm":
        b_vec, s_mat, a_diag, theta = _gbm_coeffs(model)
        dW = sq_dt * gen_w.standard_normal((bn, K, d))
        Wsum = dW.sum(axis=1)
        logX = np.log(x0) + (b_vec - 0.5 * a_diag) * tau + Wsum @ s_mat.T
        logZ = -0.5 * float(theta @ theta) * tau - Wsum @ theta
    elif model.kind == "bessel3":
        dW = sq_dt * gen_w.standard_normal((bn, K, 1))
        xi = _block_gen(cfg.seed, block_index, _REGION_BRIDGE).standard_normal((bn, K))
        y, lz, _ = _kernels.bessel3_log_paths(
            np.full(bn, np.log(x0[0])), dW[:, :, 0], xi, dt, LOG_FLOOR
        )
        logX = y[:, -1:][:, :]
        logZ = lz[:, -1]
    else:
        dW = sq_dt * gen_w.standard_normal((bn, K, d))
        xi = _block_gen(cfg.seed, block_index, _REGION_BRIDGE).standard_normal((bn, K, d))
        y, lz, _ = _generic_log_euler(model, np.log(x0), dW, xi, dt)
        logX = y[:, -1, :]
        logZ = lz[:, -1]
    _check_log_range(logX, logZ, f"terminal_block({model.name}, log-euler)")
    return np.exp(np.atleast_2d(logX.reshape(bn, d))), np.exp(logZ), B_T


@dataclass(frozen=True)
class IntegrabilityReport:
    """Discrete-path check of the coefficient integrability sum
    sum_i int (|b_i| + a_ii + theta_i^2) dt against a cap."""

    sums: np.ndarray
    flagged_paths: np.ndarray
    cap: float

    @property
    def passed(self) -> bool:
        return self.flagged_paths.size == 0


def integrability_diagnostic(model: MarketModel, bundle: PathBundle, cap: float = 1e6) -> IntegrabilityReport:
    n, k1, d = bundle.X.shape
    dt = bundle.t[1] - bundle.t[0]
    sums = np.zeros(n)
    for k in range(k1 - 1):
        xk = bundle.X[:, k, :]
        bv = np.abs(np.asarray(model.b(xk), dtype=float)).sum(axis=1)
        sv = np.asarray(model.s(xk), dtype=float)
        a_diag = np.einsum("nij,nij->ni", sv, sv).sum(axis=1)
        th = model.theta(xk)
        sums += (bv + a_diag + (th * th).sum(axis=1)) * dt
    flagged = np.nonzero(sums > cap)[0]
    sums.flags.writeable = False
    return IntegrabilityReport(sums=sums, flagged_paths=flagged, cap=float(cap))
