"""Augmented-Lagrangian loop: gradients, filtering, line search, updates."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from millforge import primitives as prim
from millforge.fem import LoadCase, Material, PatchRegion
from millforge.grid import GridSpec
from millforge.levelset import LevelSet
from millforge.milling import ToolModel
from millforge.optimizer import (
    AugLagState,
    MillingSpec,
    Problem,
    apply_growth_gate,
    build_speed,
    compute_filter,
    evaluate,
    lagrangian_gradient,
    line_search,
    outer_update,
    relaxed_speeds,
    relaxed_step,
    run,
    strict_step,
)

H = 1.0
L_BOX = 12.0


def _toy_problem(milling_mode="off", algorithm="strict", tool=None, **kw):
    """Small loaded block: bottom fixed, top loaded."""
    pad = 4.0 if tool is None else tool.head_radius + 2 * H
    g = GridSpec.from_bounds((-pad, -pad, -pad),
                             (L_BOX + pad, L_BOX + pad, L_BOX + pad), H)
    dom = LevelSet.from_sdf(g, prim.box_from_bounds(g, (0, 0, 0),
                                                    (L_BOX, L_BOX, L_BOX)),
                            band_width=4.0 if tool is None else tool.head_radius + 2 * H)
    top = LevelSet.from_sdf(g, prim.box_from_bounds(g, (0, 0, L_BOX - 1.5),
                                                    (L_BOX, L_BOX, L_BOX)),
                            band_width=dom.band_width)
    bot = LevelSet.from_sdf(g, prim.box_from_bounds(g, (0, 0, 0),
                                                    (L_BOX, L_BOX, 1.5)),
                            band_width=dom.band_width)
    pres = top.union(bot)
    lc = LoadCase(
        tractions=[(PatchRegion((0, 0, L_BOX), (L_BOX, L_BOX, L_BOX), (0, 0, 1)),
                    np.array([0, 0, -10.0]))],
        fixed=[PatchRegion((0, 0, 0), (L_BOX, L_BOX, 0), (0, 0, -1))],
    )
    spec = MillingSpec(milling_mode)
    return Problem(
        domain=dom, material=Material(10e9, 0.3), load_cases=[lc],
        volume_fraction=kw.pop("volume_fraction", 0.4), preserved=pres,
        tool=tool, milling=spec, algorithm=algorithm, **kw,
    )


class TestLagrangianGradient:
    def test_pure_compliance_when_unconstrained(self):
        problem = _toy_problem()
        state = AugLagState(lam=0.0, mu=1e-9)
        L, dL, ev = lagrangian_gradient(problem, problem.domain, state)
        # mu -> 0+: the volume term max(0, mu g)/V vanishes in the limit
        np.testing.assert_allclose(dL, -ev.gradient / state.c0, atol=1e-9)

    def test_deep_feasibility_drops_volume_term(self):
        problem = _toy_problem(volume_fraction=0.9)
        state = AugLagState(lam=0.1, mu=10.0)
        # a laterally shrunk column (still spanning both patches) sits far
        # below the target: g < -lam/mu
        small = LevelSet.from_sdf(
            problem.domain.grid,
            prim.box_from_bounds(problem.domain.grid, (3.0, 3.0, 0),
                                 (L_BOX - 3.0, L_BOX - 3.0, L_BOX)),
            band_width=problem.domain.band_width)
        L, dL, ev = lagrangian_gradient(problem, small, state)
        assert ev.g < -state.lam / state.mu
        np.testing.assert_allclose(dL, -ev.gradient / state.c0, rtol=1e-12)

    def test_descent_prediction(self):
        # advect along -dL: L decreases and the drop matches
        # -eps * integral dL^2 within 20%
        problem = _toy_problem()
        state = AugLagState(lam=0.0, mu=problem.penalty0)
        L0, dL, ev = lagrangian_gradient(problem, problem.domain, state)
        v = -dL
        on_patch = problem.preserved.sample(ev.samples.positions) <= 0.5 * H
        margin = (ev.samples.positions[:, 2] > 3.0) & (ev.samples.positions[:, 2] < 9.0)
        v = np.where(on_patch | ~margin, 0.0, v)
        band = problem.domain.extend_normal(ev.samples, v)
        # boundary motion of 0.3h: big enough to dominate redistance jitter,
        # small enough to stay first order
        eps = 0.3 * H / np.abs(v).max()
        moved = problem.domain.advect(band, eps)
        L1 = evaluate(problem, moved, state).lagrangian(state)
        drop = L1 - L0
        predicted = -eps * np.sum(dL[v != 0.0] ** 2) * H * H
        assert drop < 0
        assert abs(drop - predicted) <= 0.20 * abs(predicted)


class TestSpeedAssembly:
    def test_growth_gate_zeroes_positive_speeds(self):
        eta = np.array([0.5, 0.8, 0.0, 1.0])
        v = np.array([1.0, -2.0, 0.5, 0.0])
        gated = apply_growth_gate(eta, v)
        np.testing.assert_array_equal(gated, [0.0, 0.8, 0.0, 1.0])

    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=32),
           st.floats(0.05, 1.0))
    @settings(max_examples=60, deadline=None)
    def test_relaxed_fill_property(self, vs, alpha):
        v = np.asarray(vs)
        eta = (np.arange(v.size) % 2).astype(float)
        out = relaxed_speeds(eta, v, alpha)
        vmax = v.max()
        assert np.allclose(out[eta == 0.0], alpha * vmax)
        assert np.allclose(out[eta > 0.0], (eta * v)[eta > 0.0])

    def test_preserved_patches_pinned(self):
        problem = _toy_problem()
        state = AugLagState(lam=0.0, mu=problem.penalty0)
        ev = evaluate(problem, problem.domain, state)
        speed, _ = build_speed(problem, problem.domain, ev, state, None)
        on_patch = problem.preserved.sample(ev.samples.positions) <= 0.5 * H
        assert np.all(speed.sample_values[on_patch] == 0.0)
        assert on_patch.sum() > 0


class TestSteps:
    def test_mode_off_allows_growth(self):
        problem = _toy_problem()
        state = AugLagState(lam=0.0, mu=problem.penalty0)
        ev = evaluate(problem, problem.domain, state)
        speed, frac0 = build_speed(problem, problem.domain, ev, state, None)
        assert frac0 == 0.0
        # unclamped: positive raw speeds survive (standard TO step)
        raw = -ev.dL(state, problem.domain.volume())
        keep = problem.preserved.sample(ev.samples.positions) > 0.5 * H
        np.testing.assert_allclose(speed.sample_values[keep], raw[keep])

    def test_fully_blocked_filter_freezes_shape(self):
        tool = ToolModel(1.0, 6.0, 2.5)
        problem = _toy_problem(milling_mode="hemisphere", tool=tool)
        state = AugLagState(lam=0.0, mu=problem.penalty0)
        ev = evaluate(problem, problem.domain, state)
        eta = compute_filter(problem, problem.domain, ev.samples)
        eta.eta[:] = 0.0  # force total inaccessibility
        speed, frac0 = build_speed(problem, problem.domain, ev, state, eta)
        assert frac0 == 1.0
        eps, trial, halvings = line_search(problem, problem.domain, speed, state,
                                           ev.lagrangian(state))
        assert speed.max_abs == 0.0
        assert trial is None and eps == 0.0

    def test_strict_step_shrinks_only(self):
        tool = ToolModel(1.0, 6.0, 2.5)
        problem = _toy_problem(milling_mode="hemisphere", algorithm="strict",
                               tool=tool, volume_fraction=0.3)
        state = AugLagState(lam=0.0, mu=problem.penalty0)
        base = evaluate(problem, problem.domain, state)
        step = strict_step(problem, problem.domain, state, base)
        assert not step.stalled
        slack = H * 50 * H * H  # one cell of surface motion worth of volume
        assert step.evaluation.volume <= base.volume + slack

    def test_relaxed_equals_strict_when_fully_accessible(self):
        tool = ToolModel(1.0, 6.0, 2.5)
        ps = _toy_problem(milling_mode="hemisphere", algorithm="strict", tool=tool)
        pr = _toy_problem(milling_mode="hemisphere", algorithm="relaxed", tool=tool)
        state_s = AugLagState(lam=5.0, mu=ps.penalty0)
        state_r = AugLagState(lam=5.0, mu=pr.penalty0)
        ev_s = evaluate(ps, ps.domain, state_s)
        ev_r = evaluate(pr, pr.domain, state_r)
        eta = compute_filter(ps, ps.domain, ev_s.samples)
        v = -ev_s.dL(state_s, ps.domain.volume())
        # when every sample is accessible AND every speed is removal, the two
        # update rules coincide
        if (eta.eta > 0).all() and (v <= 0).all():
            sp_s, _ = build_speed(ps, ps.domain, ev_s, state_s, eta)
            sp_r, _ = build_speed(pr, pr.domain, ev_r, state_r, eta)
            np.testing.assert_allclose(sp_s.sample_values, sp_r.sample_values)

    def test_line_search_rejects_ascent(self):
        # start strictly inside the domain, below the volume target: dL is
        # pure (negative) compliance gradient and +dL is genuine ascent
        problem = _toy_problem(volume_fraction=0.9)
        state = AugLagState(lam=0.0, mu=problem.penalty0)
        column = LevelSet.from_sdf(
            problem.domain.grid,
            prim.box_from_bounds(problem.domain.grid, (3.0, 3.0, 0),
                                 (L_BOX - 3.0, L_BOX - 3.0, L_BOX)),
            band_width=problem.domain.band_width)
        ev = evaluate(problem, column, state)
        dL = ev.dL(state, problem.domain.volume())
        uphill = column.extend_normal(ev.samples, dL)
        from millforge.optimizer import SpeedField
        speed = SpeedField(dL, uphill)
        eps, trial, halvings = line_search(problem, column, speed, state,
                                           ev.lagrangian(state))
        assert trial is None
        assert halvings == problem.max_halvings


class TestOuterUpdate:
    def test_zero_violation_keeps_multiplier(self):
        state = AugLagState(lam=2.0, mu=10.0, last_outer_g=0.4)
        outer_update(state, 0.0)
        assert state.lam == 2.0

    def test_inactive_inequality_stays_at_zero(self):
        state = AugLagState(lam=0.0, mu=10.0)
        outer_update(state, -0.3)
        assert state.lam == 0.0

    def test_penalty_doubles_until_cap(self):
        state = AugLagState(lam=0.0, mu=10.0)
        for _ in range(25):
            outer_update(state, 0.1)
        assert state.mu == 1e6

    @given(st.floats(-1, 1), st.floats(0, 100), st.floats(1e-3, 1e5))
    @settings(max_examples=100, deadline=None)
    def test_multiplier_stays_nonnegative(self, g, lam, mu):
        state = AugLagState(lam=lam, mu=mu)
        outer_update(state, g)
        assert state.lam >= 0.0
        assert state.mu >= mu


class TestRun:
    @pytest.fixture(scope="class")
    def small_run(self, tmp_path_factory):
        problem = _toy_problem(volume_fraction=0.45, max_iters=120)
        log = tmp_path_factory.mktemp("run") / "log.csv"
        return run(problem, log_path=log), problem, log

    def test_descends_within_multiplier_regimes(self, small_run):
        result, problem, _ = small_run
        rows = result.history
        for a, b in zip(rows, rows[1:]):
            if (a.lam, a.mu) == (b.lam, b.mu) and b.eps > 0.0:
                assert b.L < a.L + 1e-12

    def test_reaches_volume_target(self, small_run):
        result, problem, _ = small_run
        assert result.feasible
        assert abs(result.final_volume_fraction - problem.volume_fraction) <= 0.01

    def test_preserved_regions_survive(self, small_run):
        result, problem, _ = small_run
        keep = problem.preserved.values <= -H
        assert (result.omega.values[keep] < 0).all()

    def test_log_columns(self, small_run):
        _, _, log = small_run
        header = log.read_text().splitlines()[0]
        assert header == "iter,L,compliance,volume_fraction,lambda,mu,eps,max_speed,frac_eta_zero"

    def test_symmetry_maintained(self):
        problem = _toy_problem(volume_fraction=0.5, max_iters=8)
        problem.symmetry_planes = [(0, L_BOX / 2.0)]
        result = run(problem)
        v = result.omega.values
        axis_nodes = problem.domain.grid.dims[0]
        plane_idx = int(round((L_BOX / 2.0 - problem.domain.grid.origin[0]) / H))
        src = np.arange(axis_nodes)
        refl = 2 * plane_idx - src
        ok = (refl >= 0) & (refl < axis_nodes)
        mirrored = v[refl[ok], :, :]
        near = np.abs(v[src[ok], :, :]) <= H
        assert np.abs(v[src[ok], :, :] - mirrored)[near].max() <= 1.5 * H
