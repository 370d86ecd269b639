"""Market models: diffusion coefficients, payoffs, and derived quantities.

A model is a coefficient bundle (b, s) for d stocks with relative drift
b(x) and relative volatility matrix s(x), evaluated batchwise: coefficient
callables map an (n, d) array of states to (n, d) for b and (n, d, d) for
s.  Everything else (market price of risk theta = s^{-1} b, a = s s',
mu_i = b_i x_i, sigma_ik = s_ik x_i, alpha = sigma sigma') is derived.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidCoefficients, SingularDiffusion, UnknownModel

COND_LIMIT = 1e12

# Expression vocabulary for custom coefficient strings; x1..xd added per call.
_EXPR_NAMES = {
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "sin": np.sin,
    "cos": np.cos,
    "tanh": np.tanh,
    "minimum": np.minimum,
    "maximum": np.maximum,
    "pi": np.pi,
}


@dataclass(frozen=True)
class MarketModel:
    """Immutable coefficient bundle; coefficient callables must be pure."""

    dim: int
    b: Callable[[np.ndarray], np.ndarray]
    s: Callable[[np.ndarray], np.ndarray]
    name: str
    kind: str = "custom"
    params: dict = field(default_factory=dict)

    def _points(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.dim:
            raise ValueError(f"expected points of dimension {self.dim}, got shape {x.shape}")
        return x

    def drift(self, x) -> np.ndarray:
        return np.asarray(self.b(self._points(x)), dtype=float)

    def vol(self, x) -> np.ndarray:
        return np.asarray(self.s(self._points(x)), dtype=float)

    def theta(self, x) -> np.ndarray:
        """Market price of risk s(x)^{-1} b(x), batched; no conditioning check."""
        pts = self._points(x)
        svals = np.asarray(self.s(pts), dtype=float)
        bvals = np.asarray(self.b(pts), dtype=float)
        try:
            return np.linalg.solve(svals, bvals[..., None])[..., 0]
        except np.linalg.LinAlgError as exc:
            raise SingularDiffusion(f"volatility matrix singular for model {self.name}: {exc}") from None

    def a(self, x) -> np.ndarray:
        svals = self.vol(x)
        return svals @ np.swapaxes(svals, -1, -2)

    def mu(self, x) -> np.ndarray:
        pts = self._points(x)
        return self.drift(pts) * pts

    def sigma(self, x) -> np.ndarray:
        pts = self._points(x)
        return self.vol(pts) * pts[:, :, None]

    def alpha(self, x) -> np.ndarray:
        sig = self.sigma(x)
        return sig @ np.swapaxes(sig, -1, -2)


@dataclass(frozen=True)
class Payoff:
    """Terminal claim g(X(T)) > 0, evaluated batchwise (n, d) -> (n,)."""

    g: Callable[[np.ndarray], np.ndarray]
    growth_class: str = "linear"
    name: str = "payoff"

    def __call__(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.asarray(self.g(x), dtype=float)


def linear_payoff(weights=None) -> Payoff:
    """g(x) = w . x ; default takes the first coordinate."""
    if weights is None:
        return Payoff(lambda x: x[:, 0], "linear", "first-coordinate")
    w = np.asarray(weights, dtype=float)
    return Payoff(lambda x: x @ w, "linear", "weighted-sum")


def payoff_from_expression(expr: str, dim: int, growth_class: str = "other") -> Payoff:
    fn = _compile_expression(expr, dim)
    return Payoff(fn, growth_class, f"expr:{expr}")


def market_price_of_risk(model: MarketModel, x) -> np.ndarray:
    """theta(x) solving s(x) theta = b(x) at a single point, with conditioning check."""
    pt = np.atleast_1d(np.asarray(x, dtype=float))
    if pt.ndim != 1 or pt.shape[0] != model.dim:
        raise ValueError(f"expected a point of dimension {model.dim}")
    if not np.all(pt > 0):
        raise ValueError("point must be strictly positive componentwise")
    svals = model.vol(pt[None, :])[0]
    bvals = model.drift(pt[None, :])[0]
    cond = np.linalg.cond(svals)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularDiffusion(
            f"volatility matrix at x={pt.tolist()} has condition estimate {cond:.3e}"
        )
    try:
        theta = np.linalg.solve(svals, bvals)
    except np.linalg.LinAlgError as exc:
        raise SingularDiffusion(f"linear solve failed at x={pt.tolist()}: {exc}") from None
    return theta


def _compile_expression(expr: str, dim: int) -> Callable[[np.ndarray], np.ndarray]:
    code = compile(expr, f"<expr {expr!r}>", "eval")
    for name in code.co_names:
        if name not in _EXPR_NAMES and not (name.startswith("x") and name[1:].isdigit()):
            raise InvalidCoefficients(f"unknown name {name!r} in expression {expr!r}")

    def fn(x: np.ndarray) -> np.ndarray:
        scope = dict(_EXPR_NAMES)
        for i in range(dim):
            scope[f"x{i + 1}"] = x[:, i]
        out = eval(code, {"__builtins__": {}}, scope)
        return np.broadcast_to(np.asarray(out, dtype=float), (x.shape[0],)).copy()

    return fn


def _constant_model(name: str, kind: str, b_vec: np.ndarray, s_mat: np.ndarray) -> MarketModel:
    d = b_vec.shape[0]

    def b_fn(x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(b_vec, (x.shape[0], d)).copy()

    def s_fn(x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(s_mat, (x.shape[0], d, d)).copy()

    return MarketModel(d, b_fn, s_fn, name, kind, {"b": b_vec.copy(), "s": s_mat.copy()})


def builtin_model(kind: str, **params) -> MarketModel:
    """Construct a validated model.

    kind "gbm": constant coefficients; params b (scalar or length-d), s
    (scalar, length-d diagonal, or full d x d matrix).
    kind "bessel3": d=1, b(x) = 1/x^2, s(x) = 1/x.
    kind "custom": params dim, b_exprs (list of d strings), s_exprs (d x d
    nested list of strings) in variables x1..xd.
    """
    if kind == "bessel3":
        if params:
            raise InvalidCoefficients(f"bessel3 takes no parameters, got {sorted(params)}")

        def b_fn(x: np.ndarray) -> np.ndarray:
            return 1.0 / (x * x)

        def s_fn(x: np.ndarray) -> np.ndarray:
            return (1.0 / x)[:, :, None]

        return MarketModel(1, b_fn, s_fn, "bessel3", "bessel3", {})

    if kind == "gbm":
        try:
            b_in = params.pop("b")
            s_in = params.pop("s")
        except KeyError as exc:
            raise InvalidCoefficients(f"gbm requires parameter {exc}") from None
        if params:
            raise InvalidCoefficients(f"unknown gbm parameters {sorted(params)}")
        b_vec = np.atleast_1d(np.asarray(b_in, dtype=float))
        s_arr = np.asarray(s_in, dtype=float)
        if s_arr.ndim == 0:
            s_mat = s_arr.reshape(1, 1) if b_vec.shape[0] == 1 else np.eye(b_vec.shape[0]) * s_arr
        elif s_arr.ndim == 1:
            s_mat = np.diag(s_arr)
        else:
            s_mat = s_arr
        d = b_vec.shape[0]
        if s_mat.shape != (d, d):
            raise InvalidCoefficients(f"s shape {s_mat.shape} incompatible with b length {d}")
        model = _constant_model(f"gbm(b={b_vec.tolist()},s={s_mat.tolist()})", "gbm", b_vec, s_mat)
        _validation_sample(model)
        return model

    if kind == "custom":
        try:
            dim = int(params["dim"])
            b_exprs = list(params["b_exprs"])
            s_exprs = [list(row) for row in params["s_exprs"]]
        except KeyError as exc:
            raise InvalidCoefficients(f"custom model requires parameter {exc}") from None
        if len(b_exprs) != dim or len(s_exprs) != dim or any(len(r) != dim for r in s_exprs):
            raise InvalidCoefficients("custom model needs d drift and d*d volatility expressions")
        b_fns = [_compile_expression(e, dim) for e in b_exprs]
        s_fns = [[_compile_expression(e, dim) for e in row] for row in s_exprs]

        def b_fn(x: np.ndarray) -> np.ndarray:
            return np.stack([f(x) for f in b_fns], axis=1)

        def s_fn(x: np.ndarray) -> np.ndarray:
            return np.stack([np.stack([f(x) for f in row], axis=1) for row in s_fns], axis=1)

        name = params.get("name", "custom")
        model = MarketModel(dim, b_fn, s_fn, str(name), "custom", {"b_exprs": b_exprs, "s_exprs": s_exprs})
        _validation_sample(model)
        return model

    raise UnknownModel(f"unknown model kind {kind!r}")


# Construction-time probes deliberately avoid round numbers so that models
# singular at a user-relevant point (for example s(x) = x - 1 at x = 1)
# still construct and are caught by validate() instead.
_PROBE_SCALES = (0.6, 1.3, 2.9)


def _validation_sample(model: MarketModel) -> None:
    pts = np.array([[c] * model.dim for c in _PROBE_SCALES])
    svals = model.vol(pts)
    bvals = model.drift(pts)
    if not (np.all(np.isfinite(svals)) and np.all(np.isfinite(bvals))):
        raise InvalidCoefficients(f"coefficients not finite at validation probes for {model.name}")
    for k, c in enumerate(_PROBE_SCALES):
        cond = np.linalg.cond(svals[k])
        if not np.isfinite(cond) or cond > COND_LIMIT:
            raise InvalidCoefficients(
                f"volatility matrix singular at validation probe x={c} for {model.name}"
            )


@dataclass(frozen=True)
class ModelDiagnostics:
    """Spot-check report from validate(); informational, never raised."""

    points: np.ndarray
    cond_s: np.ndarray
    singular_points: tuple
    lipschitz_theta: float
    lipschitz_s: float
    passed: bool


def validate(model: MarketModel, probe_points) -> ModelDiagnostics:
    """Sampled diagnostics: conditioning of s and finite-difference Lipschitz
    quotients of theta and s over probe pairs.  Flags, never raises."""
    pts = np.atleast_2d(np.asarray(probe_points, dtype=float))
    n = pts.shape[0]
    svals = model.vol(pts)
    conds = np.array([np.linalg.cond(svals[k]) for k in range(n)])
    singular = tuple(tuple(pts[k]) for k in range(n) if not np.isfinite(conds[k]) or conds[k] > COND_LIMIT)
    ok = np.array([k for k in range(n) if tuple(pts[k]) not in set(singular)], dtype=int)
    lip_theta = 0.0
    lip_s = 0.0
    if ok.size >= 2:
        good = pts[ok]
        thetas = model.theta(good)
        svals_ok = svals[ok]
        for i in range(len(good)):
            for j in range(i + 1, len(good)):
                dx = np.linalg.norm(good[i] - good[j])
                if dx == 0:
                    continue
                lip_theta = max(lip_theta, np.linalg.norm(thetas[i] - thetas[j]) / dx)
                lip_s = max(lip_s, np.linalg.norm(svals_ok[i] - svals_ok[j]) / dx)
    return ModelDiagnostics(
        points=pts,
        cond_s=conds,
        singular_points=singular,
        lipschitz_theta=float(lip_theta),
        lipschitz_s=float(lip_s),
        passed=not singular,
    )
