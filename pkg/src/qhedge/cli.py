"""Command-line driver: config ingestion, runs, studies, persistence.

Subcommands: price, dual, solve, verify, study-epsilon, compare-oracle.
Configs are INI files with [model], [payoff], [grid], [run] sections (see
README for the schema).  All artifacts are data-only (CSV plus a JSON
summary); identical config and seed produce byte-identical outputs except
for the isolated "timestamp" key in the JSON.

Exit codes: 0 success (verify: pass), 1 verify failure, 2 configuration
error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import configparser
import datetime
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__, engine, market, mc, oracles, pde
from .errors import ConfigError, Nonfinite, QhedgeError
from .surfaces import GridSpec, read_surface_bin, write_surface_bin, write_surface_csv

_SCHEMA = 1


def _floats(text: str) -> list:
    return [float(tok) for tok in text.replace(",", " ").split()]


def _parse_model(cp: configparser.ConfigParser) -> market.MarketModel:
    if not cp.has_section("model"):
        raise ConfigError("missing [model] section")
    sec = cp["model"]
    kind = sec.get("kind", "").strip()
    if kind == "bessel3":
        return market.builtin_model("bessel3")
    if kind == "gbm":
        if "b" not in sec or "s" not in sec:
            raise ConfigError("gbm model needs b and s")
        b = _floats(sec["b"])
        s = _floats(sec["s"])
        return market.builtin_model("gbm", b=b[0] if len(b) == 1 else b,
                                    s=s[0] if len(s) == 1 else s)
    if kind == "custom":
        dim = sec.getint("dim", 1)
        b_exprs = [e.strip() for e in sec.get("b_exprs", "").split(";") if e.strip()]
        s_exprs = [[e.strip() for e in row.split(",")]
                   for row in sec.get("s_exprs", "").split(";") if row.strip()]
        return market.builtin_model("custom", dim=dim, b_exprs=b_exprs, s_exprs=s_exprs)
    raise ConfigError(f"unknown model kind {kind!r}")


def _parse_payoff(cp: configparser.ConfigParser, dim: int) -> market.Payoff:
    if not cp.has_section("payoff"):
        return market.linear_payoff()
    sec = cp["payoff"]
    kind = sec.get("kind", "linear").strip()
    if kind == "linear":
        w = sec.get("weights", "").strip()
        return market.linear_payoff(_floats(w) if w else None)
    if kind == "expression":
        expr = sec.get("expr", "").strip()
        if not expr:
            raise ConfigError("expression payoff needs expr")
        return market.payoff_from_expression(expr, dim, sec.get("growth_class", "other"))
    raise ConfigError(f"unknown payoff kind {kind!r}")


def _parse_grid(cp: configparser.ConfigParser, epsilon: float) -> GridSpec:
    if not cp.has_section("grid"):
        raise ConfigError("this command needs a [grid] section")
    sec = cp["grid"]
    try:
        return GridSpec.regular(
            sec.getfloat("t0", 0.0),
            sec.getfloat("T", 1.0),
            sec.getint("n_t", 64),
            sec.getfloat("x_min"),
            sec.getfloat("x_max"),
            sec.getint("n_x", 128),
            sec.getint("n_z", 128),
            sec.get("domain", "q").strip(),
            z_max=sec.getfloat("z_max", fallback=None),
            epsilon=epsilon,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad [grid] section: {exc}") from None


class _Run:
    """Everything a subcommand needs, pulled out of the config and flags."""

    def __init__(self, args):
        self.out = args.out
        path = args.config
        if path is None:
            raise ConfigError("--config is required")
        try:
            with open(path, "rb") as fh:
                raw = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        self.config_sha = hashlib.sha256(raw).hexdigest()
        cp = configparser.ConfigParser()
        try:
            cp.read_string(raw.decode("utf-8"))
        except (UnicodeDecodeError, configparser.Error) as exc:
            raise ConfigError(f"cannot parse config: {exc}") from None
        self.cp = cp
        self.model = _parse_model(cp)
        self.payoff = _parse_payoff(cp, self.model.dim)
        run = cp["run"] if cp.has_section("run") else {}
        self.method = args.method or run.get("method", "mc")
        if self.method not in ("mc", "pde", "pipeline"):
            raise ConfigError(f"unknown method {self.method!r}")
        self.seed = args.seed if args.seed is not None else int(run.get("seed", 0))
        self.x0 = np.asarray(_floats(run.get("x0", "1.0")))
        if self.x0.shape != (self.model.dim,):
            raise ConfigError(f"x0 must have {self.model.dim} components")
        self.n_paths = int(run.get("n_paths", 100_000))
        self.n_steps = int(run.get("n_steps", 64))
        self.scheme = run.get("scheme", "").strip() or engine.default_scheme(self.model)
        self.t0 = cp.getfloat("grid", "t0", fallback=float(run.get("t0", 0.0)))
        self.T = cp.getfloat("grid", "T", fallback=float(run.get("T", 1.0)))
        raw_eps = run.get("epsilons", None)
        if raw_eps is None:
            self.epsilons = None
        else:
            self.epsilons = _floats(raw_eps)
            if any(e <= 0 for e in self.epsilons):
                raise ConfigError("epsilons must be positive")
        self.q_window = _floats(run.get("q_window", "0.2 2.0"))
        if len(self.q_window) != 2 or not 0 <= self.q_window[0] < self.q_window[1]:
            raise ConfigError("q_window must be 'lo hi' with 0 <= lo < hi")
        self.n_probe = int(run.get("n_probe", 41))
        self.p_points = int(run.get("p_points", 101))
        self.tolerance = float(run["tolerance"]) if "tolerance" in run else None
        threads = args.threads if args.threads is not None else int(run.get("threads", 0))
        self.threads = threads if threads > 0 else (os.cpu_count() or 1)
        refine = run.get("refine", "").strip()
        if not refine:
            self.refine = None
        elif refine == "auto":
            self.refine = "auto"
        else:
            vals = [int(v) for v in refine.replace(",", " ").split()]
            self.refine = vals[0] if len(vals) == 1 else tuple(vals)
        pad = run.get("pad", "").strip()
        if not pad or pad == "auto":
            self.pad = None
        else:
            vals = [int(v) for v in pad.replace(",", " ").split()]
            self.pad = vals[0] if len(vals) == 1 else tuple(vals)

    def grid(self, epsilon: float) -> GridSpec:
        return _parse_grid(self.cp, epsilon)

    def sim_config(self, epsilon: float = 0.0) -> engine.SimConfig:
        return engine.SimConfig(self.t0, self.T, self.n_steps, self.n_paths,
                                self.seed, self.scheme, epsilon)

    def samples(self, epsilon: float = 0.0) -> mc.SampleSet:
        return mc.sample_terminal(self.model, self.payoff, self.x0,
                                  self.sim_config(epsilon), threads=self.threads)

    def solve(self, epsilon: float):
        return pde.solve_dual_pde(self.model, self.payoff, self.grid(epsilon),
                                  pad=self.pad, refine=self.refine)

    def provenance(self, command: str, grid: GridSpec = None) -> dict:
        gdict = None
        if grid is not None:
            gdict = {
                "t0": grid.t[0], "T": grid.t[-1], "n_t": int(grid.t.size),
                "x_min": grid.x_axes[0][0], "x_max": grid.x_axes[0][-1],
                "n_x": [int(ax.size) for ax in grid.x_axes],
                "n_z": int(grid.z.size), "domain": grid.domain,
                "epsilon": grid.epsilon,
            }
        return {
            "schema": _SCHEMA,
            "version": __version__,
            "command": command,
            "method": self.method,
            "seed": self.seed,
            "config_sha256": self.config_sha,
            "model": self.model.name,
            "payoff": self.payoff.name,
            "grid": gdict,
        }

    def write_json(self, name: str, payload: dict) -> None:
        payload = dict(payload)
        payload["timestamp"] = datetime.datetime.now(datetime.timezone.utc).isoformat()
        with open(os.path.join(self.out, name), "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, name: str, header: str, rows) -> None:
        with open(os.path.join(self.out, name), "w") as fh:
            fh.write(header + "\n")
            for row in rows:
                fh.write(",".join("%.17g" % v if isinstance(v, float) else str(v)
                                  for v in row) + "\n")


def cmd_price(run: _Run) -> int:
    p_grid = mc.default_p_grid(run.p_points)
    grid = None
    if run.method == "mc":
        samples = run.samples()
        p_arr, value, se = mc.quantile_curve(samples, p_grid)
        rows = [(float(p), float(v), float(s)) for p, v, s in zip(p_arr, value, se)]
    else:
        eps = run.epsilons[0] if run.epsilons else 0.0
        surf = run.solve(eps)
        primal = pde.dual_to_primal(surf, p_grid)
        grid = surf.grid
        vals = primal.values[0, ...]
        idx = tuple(int(np.argmin(np.abs(ax - x))) for ax, x in
                    zip(grid.x_axes, run.x0))
        rows = [(float(p), float(vals[idx + (j,)]), 0.0) for j, p in enumerate(p_grid)]
    run.write_csv("price.csv", "p,value,stderr", rows)
    summary = {k: {"value": v, "stderr": s}
               for k, v, s in (rows[len(rows) // 10], rows[len(rows) // 2], rows[-1])}
    run.write_json("price.json", {
        "provenance": run.provenance("price", grid),
        "rows": len(rows),
        "artifact": "price.csv",
        "summary": {"%.3f" % k: val for k, val in summary.items()},
    })
    return 0


def cmd_dual(run: _Run) -> int:
    eps_list = run.epsilons or []
    grid = None
    rows = []
    artifacts = ["dual.csv"]
    if run.method == "mc":
        samples = run.samples()
        q_hi = run.q_window[1]
        q_grid = np.linspace(0.0, q_hi, run.n_probe)
        for q in q_grid:
            est = mc.dual_value(samples, float(q))
            rows.append((0.0, float(q), est.value, est.std_error))
        for eps in eps_list:
            for q in q_grid:
                est = mc.dual_value_regularized(samples, float(q), eps)
                rows.append((eps, float(q), est.value, est.std_error))
    else:
        for eps in eps_list or [0.0]:
            surf = run.solve(eps)
            grid = surf.grid
            tag = ("%g" % eps).replace(".", "p")
            write_surface_bin(surf, os.path.join(run.out, f"dual_eps{tag}.bin"))
            write_surface_csv(surf, os.path.join(run.out, f"dual_eps{tag}.csv"))
            artifacts += [f"dual_eps{tag}.bin", f"dual_eps{tag}.csv"]
            ix = tuple(int(np.argmin(np.abs(ax - x))) for ax, x in
                       zip(grid.x_axes, run.x0))
            for j, q in enumerate(grid.z):
                rows.append((eps, float(q), float(surf.values[0][ix + (j,)]), 0.0))
    run.write_csv("dual.csv", "epsilon,q,value,stderr", rows)
    run.write_json("dual.json", {
        "provenance": run.provenance("dual", grid),
        "rows": len(rows),
        "epsilons": eps_list,
        "artifacts": artifacts,
    })
    return 0


def cmd_solve(run: _Run) -> int:
    if run.epsilons is None:
        raise ConfigError("solve needs an epsilons entry in [run]")
    eps_list = run.epsilons or [0.0]
    artifacts = []
    grid = None
    for eps in eps_list:
        surf = run.solve(eps)
        grid = surf.grid
        tag = ("%g" % eps).replace(".", "p")
        write_surface_bin(surf, os.path.join(run.out, f"surface_eps{tag}.bin"))
        write_surface_csv(surf, os.path.join(run.out, f"surface_eps{tag}.csv"))
        artifacts += [f"surface_eps{tag}.bin", f"surface_eps{tag}.csv"]
        if run.method == "pipeline":
            primal = pde.dual_to_primal(surf, mc.default_p_grid(run.p_points))
            write_surface_bin(primal, os.path.join(run.out, f"primal_eps{tag}.bin"))
            write_surface_csv(primal, os.path.join(run.out, f"primal_eps{tag}.csv"))
            artifacts += [f"primal_eps{tag}.bin", f"primal_eps{tag}.csv"]
    run.write_json("solve.json", {
        "provenance": run.provenance("solve", grid),
        "epsilons": eps_list,
        "artifacts": artifacts,
    })
    return 0


def cmd_verify(run: _Run, surface_path: str) -> int:
    try:
        surf = read_surface_bin(surface_path)
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot read surface file: {exc}") from None
    tol = run.tolerance
    report = pde.verify_supersolution(surf, run.model, run.payoff, tol)
    run.write_json("verify.json", {
        "provenance": run.provenance("verify", surf.grid),
        "surface": os.path.basename(surface_path),
        "report": report.to_dict(),
    })
    return 0 if report.passed else 1


def cmd_study_epsilon(run: _Run) -> int:
    if run.epsilons is None:
        raise ConfigError("study-epsilon needs an epsilons entry in [run]")
    samples = run.samples()
    lo, hi = run.q_window
    q_grid = np.linspace(lo, hi, run.n_probe)
    base = [mc.dual_value(samples, float(q)) for q in q_grid]
    run.write_csv("study_epsilon_baseline.csv", "q,value,stderr",
                  [(float(q), e.value, e.std_error) for q, e in zip(q_grid, base)])
    tau = run.T - run.t0
    rows = []
    for eps in run.epsilons:
        gaps = []
        for q, b in zip(q_grid, base):
            reg = mc.dual_value_regularized(samples, float(q), eps)
            gaps.append((abs(reg.value - b.value), reg.std_error + b.std_error))
        k = int(np.argmax([g for g, _ in gaps]))
        sup_gap, se = gaps[k]
        bound = oracles.regularization_bound(hi, eps, tau)
        rows.append((eps, sup_gap, bound, se, sup_gap <= bound + 3.0 * se))
    run.write_csv("study_epsilon.csv", "epsilon,sup_gap,bound,gap_stderr,within", rows)
    gaps_only = [r[1] for r in rows]
    run.write_json("study_epsilon.json", {
        "provenance": run.provenance("study-epsilon"),
        "q_window": [lo, hi],
        "rows": [{"epsilon": r[0], "sup_gap": r[1], "bound": r[2],
                  "gap_stderr": r[3], "within": bool(r[4])} for r in rows],
        "monotone": bool(all(a >= b for a, b in
                             zip(gaps_only, gaps_only[1:]))),
        "artifacts": ["study_epsilon.csv", "study_epsilon_baseline.csv"],
    })
    return 0


def cmd_compare_oracle(run: _Run) -> int:
    kind = run.model.kind
    if kind not in ("bessel3", "gbm"):
        raise ConfigError("compare-oracle needs a builtin model (bessel3 or gbm)")
    samples = run.samples()
    x0 = float(run.x0[0])
    tau = run.T - run.t0
    rows = []
    if kind == "gbm":
        sec = run.cp["model"]
        b, s = _floats(sec["b"])[0], _floats(sec["s"])[0]

        def q_oracle(p):
            return oracles.gbm_quantile_value(x0, p, b, s, tau)

        def d_oracle(q):
            return oracles.gbm_dual(x0, q, b, s, tau)
    else:
        def q_oracle(p):
            return oracles.bessel_quantile_value(x0, p)

        def d_oracle(q):
            return oracles.bessel_dual(x0, q)

    for p in (0.1, 0.3, 0.5, 0.7, 0.9):
        est = mc.quantile_value(samples, p)
        ref = q_oracle(p)
        rows.append(("quantile_value", p, est.value, ref, abs(est.value - ref), est.std_error))
    for q in (0.0, 0.5, 1.0, 1.5, 2.0):
        est = mc.dual_value(samples, q * x0)
        ref = d_oracle(q * x0)
        rows.append(("dual_value", q * x0, est.value, ref, abs(est.value - ref), est.std_error))
    run.write_csv("compare_oracle.csv",
                  "quantity,coordinate,estimate,oracle,abs_gap,stderr", rows)
    worst = max(r[4] / max(3.0 * r[5], 1e-12) for r in rows)
    run.write_json("compare_oracle.json", {
        "provenance": run.provenance("compare-oracle"),
        "rows": len(rows),
        "worst_gap_over_3se": worst,
        "artifact": "compare_oracle.csv",
    })
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qhedge", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--version", action="version", version=f"qhedge {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=False, help="INI config path")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--seed", type=int, default=None, help="override [run] seed")
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (never affects results)")
    common.add_argument("--method", choices=("mc", "pde", "pipeline"), default=None)
    sub.add_parser("price", parents=[common], help="V(p) curve")
    sub.add_parser("dual", parents=[common], help="dual value curve / surfaces")
    sub.add_parser("solve", parents=[common], help="dual PDE surfaces per epsilon")
    vp = sub.add_parser("verify", parents=[common], help="supersolution check")
    vp.add_argument("surface", help="surface container (.bin) to verify")
    sub.add_parser("study-epsilon", parents=[common], help="smearing gap study")
    sub.add_parser("compare-oracle", parents=[common], help="MC vs closed forms")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        run = _Run(args)
        os.makedirs(run.out, exist_ok=True)
    except (ConfigError, QhedgeError) as exc:
        print(f"qhedge: config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"qhedge: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "price":
            return cmd_price(run)
        if args.command == "dual":
            return cmd_dual(run)
        if args.command == "solve":
            return cmd_solve(run)
        if args.command == "verify":
            return cmd_verify(run, args.surface)
        if args.command == "study-epsilon":
            return cmd_study_epsilon(run)
        if args.command == "compare-oracle":
            return cmd_compare_oracle(run)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"qhedge: config error: {exc}", file=sys.stderr)
        return 2
    except (Nonfinite, FloatingPointError) as exc:
        print(f"qhedge: numerical failure: {exc}", file=sys.stderr)
        return 3
    except QhedgeError as exc:
        print(f"qhedge: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
