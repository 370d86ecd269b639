"""Dual solver, conjugation, residuals, and the supersolution verifier on
small grids; production-scale agreement lives in the acceptance suite."""
import warnings

import numpy as np
import pytest

from qhedge import oracles, pde
from qhedge.errors import (ArgmaxAtBoundary, CFLWarning, DomainMismatch,
                           GridMismatch)
from qhedge.market import Payoff, builtin_model, linear_payoff
from qhedge.surfaces import GridSpec, Surface


def radial_grid(n_t=8, n_x=20, n_z=20, eps=0.1, x_min=0.5, x_max=3.0, z_max=3.0):
    return GridSpec.regular(0.0, 1.0, n_t, x_min, x_max, n_x, n_z, "q",
                            z_max=z_max, epsilon=eps)


def test_terminal_slice_is_exact_ramp():
    grid = radial_grid()
    surf = pde.solve_dual_pde(builtin_model("bessel3"), linear_payoff(), grid)
    x = grid.x_axes[0]
    ramp = np.maximum(grid.z[None, :] - x[:, None], 0.0)
    assert np.array_equal(surf.terminal, ramp)
    assert surf.meta["scheme"] == "douglas-adi"
    assert surf.grid.epsilon == 0.1


def test_zero_payoff_keeps_linear_solution():
    # with g = 0 the terminal data is w = q, which solves the equation
    # exactly (all second derivatives vanish); the scheme must preserve it
    grid = radial_grid(eps=0.2)
    zero = Payoff(lambda x: np.zeros(x.shape[0]), name="zero")
    surf = pde.solve_dual_pde(builtin_model("bessel3"), zero, grid)
    expect = np.broadcast_to(grid.z, surf.values.shape)
    assert np.max(np.abs(surf.values - expect)) < 1e-12


def test_interior_matches_heat_equation_closed_form():
    # drift-free constant-volatility model, eps = 0: the dual value is a
    # plain lognormal put, solved here on a modest grid
    model = builtin_model("gbm", b=0.0, s=0.2)
    grid = GridSpec.regular(0.0, 1.0, 24, 0.4, 2.5, 48, 48, "q",
                            z_max=3.0, epsilon=0.0)
    surf = pde.solve_dual_pde(model, linear_payoff(), grid)
    x = grid.x_axes[0]
    for ix in (18, 24, 30):
        for iq in (16, 24, 32):
            got = surf.values[0, ix, iq]
            ref = oracles.gbm_dual(x[ix], grid.z[iq], 0.0, 0.2, 1.0)
            assert got == pytest.approx(ref, abs=5e-4)


def test_interior_matches_radial_smeared_closed_form():
    # a deliberately small domain: several-percent truncation error is the
    # expected scale here, and mesh refinement must push it down
    grid = radial_grid(n_t=16, n_x=40, n_z=40, eps=0.3)
    nodes = [(20, 18), (20, 24), (26, 18), (26, 24)]

    def max_rel_err(surf):
        x = grid.x_axes[0]
        errs = []
        for ix, iq in nodes:
            ref = oracles.bessel_dual_smeared(x[ix], grid.z[iq], 0.3, 1.0)
            errs.append(abs(surf.values[0, ix, iq] - ref) / ref)
        return max(errs)

    coarse = pde.solve_dual_pde(builtin_model("bessel3"), linear_payoff(), grid)
    fine = pde.solve_dual_pde(builtin_model("bessel3"), linear_payoff(), grid,
                              refine="auto")
    assert max_rel_err(coarse) < 0.15
    assert max_rel_err(fine) < 0.08
    assert max_rel_err(fine) < max_rel_err(coarse)


def test_substep_warning_on_near_perfect_correlation():
    # the radial model's cross-correlation approaches 1 at small x, which
    # flips the solver into substepped explicit cross terms
    grid = radial_grid(n_t=6, n_x=16, n_z=16, eps=0.1, x_min=0.25, x_max=4.0)
    with pytest.warns(CFLWarning):
        surf = pde.solve_dual_pde(builtin_model("bessel3"), linear_payoff(), grid)
    assert surf.meta["substeps"] >= 8
    assert np.all(np.isfinite(surf.values))


def test_no_substeps_for_mild_correlation():
    model = builtin_model("gbm", b=0.1, s=0.2)
    grid = radial_grid(n_t=6, n_x=16, n_z=16, eps=0.1)
    with warnings.catch_warnings():
        warnings.simplefilter("error", CFLWarning)
        surf = pde.solve_dual_pde(model, linear_payoff(), grid)
    assert surf.meta["substeps"] == 1


def test_refinement_and_padding_controls():
    model = builtin_model("gbm", b=0.1, s=0.2)
    grid = radial_grid(n_t=6, n_x=14, n_z=14, eps=0.2)
    base = pde.solve_dual_pde(model, linear_payoff(), grid)
    fine = pde.solve_dual_pde(model, linear_payoff(), grid, refine=2)
    assert fine.grid.axes_equal(base.grid)
    assert np.array_equal(fine.terminal, base.terminal)
    assert fine.meta["refine"] == [2, 2, 2]
    # refinement changes interior values only modestly on a smooth problem
    delta = np.abs(fine.values[0] - base.values[0]).max()
    assert 0.0 < delta < 0.05
    bare = pde.solve_dual_pde(model, linear_payoff(), grid, pad=0)
    assert bare.meta["pad"] == [0, 0]
    mid = (slice(5, 9), slice(5, 9))
    assert np.allclose(bare.values[0][mid], base.values[0][mid], atol=2e-2)
    auto = pde.solve_dual_pde(model, linear_payoff(), grid, refine="auto")
    assert auto.meta["refine"][1] >= 1
    with pytest.raises(ValueError):
        pde.solve_dual_pde(model, linear_payoff(), grid, refine=0)


def test_domain_and_dimension_guards():
    model = builtin_model("bessel3")
    pgrid = GridSpec.regular(0.0, 1.0, 4, 0.5, 2.0, 6, 6, "p", epsilon=0.1)
    with pytest.raises(DomainMismatch):
        pde.solve_dual_pde(model, linear_payoff(), pgrid)
    with pytest.raises(ValueError):
        grid2 = GridSpec.regular(0.0, 1.0, 4, [0.5, 0.5], [2.0, 2.0],
                                 [6, 6], 6, "q", z_max=2.0)
        pde.solve_dual_pde(model, linear_payoff(), grid2)


def test_dual_to_primal_terminal_and_shape():
    grid = radial_grid(n_t=6, n_x=16, n_z=32, eps=0.1, z_max=4.0)
    surf = pde.solve_dual_pde(builtin_model("bessel3"), linear_payoff(), grid)
    p_grid = np.linspace(0.0, 1.0, 41)
    primal = pde.dual_to_primal(surf, p_grid)
    assert primal.grid.domain == "p"
    assert primal.grid.z.size == 41
    x = grid.x_axes[0]
    # terminal slice is p g(x) through the conjugate of the exact ramp
    ref = p_grid[None, :] * x[:, None]
    assert np.max(np.abs(primal.terminal - ref)) < 1e-12
    # monotone in p everywhere; convex in p up to the small conjugation
    # wrinkle the coarse q grid leaves near the flat region at low p
    d1 = np.diff(primal.values, axis=-1)
    assert d1.min() >= -1e-12
    d2 = np.diff(primal.values[:, 2:-2, :], n=2, axis=-1)
    assert d2.min() >= -5e-3
    # values stay nonnegative; the saturation row approximates the exact
    # superhedge cost x from above, with an offset set by how far the
    # padded x domain covers the diffusion cone of the top q rows (domain
    # truncation, not mesh error, so it shrinks with padding, not n)
    assert primal.values.min() >= -1e-12
    sat = primal.values[..., -1]
    assert np.all(sat >= x[None, :] * (1 - 1e-9))
    assert np.all(sat <= x[None, :] * 1.5)
    with pytest.raises(DomainMismatch):
        pde.dual_to_primal(primal)


def test_dual_to_primal_boundary_localization_guard():
    # a slice whose q range covers 4x the payoff but whose slopes still top
    # out below 1 signals a broken dual surface and must raise; slices with
    # undersized q ranges are tolerated as truncation artifacts
    grid = radial_grid(n_t=4, n_x=6, n_z=21, eps=0.1, x_min=0.4, x_max=0.6,
                       z_max=3.0)
    q = grid.z
    x = grid.x_axes[0]
    vals = np.empty(grid.shape)
    vals[-1] = np.maximum(q[None, :] - x[:, None], 0.0)
    vals[:-1] = 0.6 * q[None, None, :]  # top slope 0.6 although q_max = 3 >= 4 g
    broken = Surface(grid, vals, {})
    with pytest.raises(ArgmaxAtBoundary):
        pde.dual_to_primal(broken, np.linspace(0.0, 1.0, 21))
    # same interior slopes but a payoff too large for the window: tolerated
    grid2 = radial_grid(n_t=4, n_x=6, n_z=21, eps=0.1, x_min=1.0, x_max=2.0,
                        z_max=3.0)
    vals2 = np.empty(grid2.shape)
    vals2[-1] = np.maximum(q[None, :] - grid2.x_axes[0][:, None], 0.0)
    vals2[:-1] = 0.6 * q[None, None, :]
    primal = pde.dual_to_primal(Surface(grid2, vals2, {}),
                                np.linspace(0.0, 1.0, 21))
    assert primal.meta["saturated_slices"] > 0


def test_primal_matches_closed_form_center():
    grid = GridSpec.regular(0.0, 1.0, 24, 0.5, 3.0, 64, 64, "q",
                            z_max=4.0, epsilon=0.2)
    surf = pde.solve_dual_pde(builtin_model("bessel3"), linear_payoff(), grid)
    primal = pde.dual_to_primal(surf, np.linspace(0, 1, 101))
    got = primal.eval(0.0, 1.0, 0.5)
    ref = oracles.bessel_primal_smeared(1.0, 0.5, 0.2, 1.0)
    assert got == pytest.approx(ref, rel=0.05)


def test_hjb_residual_structure():
    grid = radial_grid(n_t=10, n_x=24, n_z=32, eps=0.2, z_max=4.0)
    surf = pde.solve_dual_pde(builtin_model("bessel3"), linear_payoff(), grid)
    primal = pde.dual_to_primal(surf, np.linspace(0, 1, 33))
    res = pde.hjb_residual(primal, builtin_model("bessel3"))
    # residual covers interior nodes only: one ring stripped per axis
    assert res.residual.shape == tuple(n - 2 for n in primal.values.shape)
    assert res.epsilon == 0.2
    assert res.n_interior == res.residual.size
    assert np.isfinite(res.max_abs())
    assert res.max_abs() > 0.0
    # nodes flagged non-convex carry NaN and are excluded from max_abs
    assert res.n_nonconvex == int(np.isnan(res.residual).sum())
    # the p-domain requirement is enforced
    with pytest.raises(DomainMismatch):
        pde.hjb_residual(surf, builtin_model("bessel3"))


def test_verifier_pass_and_fail_modes():
    grid = radial_grid(n_t=6, n_x=16, n_z=32, eps=0.1, z_max=4.0)
    model = builtin_model("bessel3")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CFLWarning)
        surf = pde.solve_dual_pde(model, linear_payoff(), grid)
    primal = pde.dual_to_primal(surf, np.linspace(0, 1, 41))
    report = pde.verify_supersolution(primal, model, linear_payoff())
    assert report.passed
    d = report.to_dict()
    assert d["passed"] is True and "terminal_max_err" in d
    # additive shift breaks the terminal identity
    shifted = Surface(primal.grid, primal.values + 0.1, dict(primal.meta))
    rep2 = pde.verify_supersolution(shifted, model, linear_payoff())
    assert not rep2.passed
    # scaling down must lose either terminal match or domination
    scaled = Surface(primal.grid, primal.values * 0.9, dict(primal.meta))
    rep3 = pde.verify_supersolution(scaled, model, linear_payoff())
    cmp3 = pde.compare_candidates(scaled, primal)
    assert (not rep3.passed) or (not cmp3.dominates(1e-9))


def test_compare_candidates_ordering():
    grid = radial_grid(n_t=4, n_x=10, n_z=10)
    vals = np.random.default_rng(0).uniform(1.0, 2.0, grid.shape)
    a = Surface(grid, vals, {})
    b = Surface(grid, vals + 0.25, {})
    up = pde.compare_candidates(b, a)
    assert up.min_diff == pytest.approx(0.25)
    assert up.n_negative == 0
    assert up.dominates(0.0)
    down = pde.compare_candidates(a, b)
    assert down.min_diff == pytest.approx(-0.25)
    assert not down.dominates(1e-3)
    other = Surface(radial_grid(n_t=5, n_x=10, n_z=10), np.zeros((5, 10, 10)), {})
    with pytest.raises(GridMismatch):
        pde.compare_candidates(a, other)


def test_default_residual_tol_scales_with_grid():
    g1 = radial_grid(n_t=8, n_x=16, n_z=16)
    g2 = radial_grid(n_t=16, n_x=32, n_z=32)
    assert pde.default_residual_tol(g2) < pde.default_residual_tol(g1)
