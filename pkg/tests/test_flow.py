"""Latent solvers: grids, integrators, exact/approximate backward passes."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gfe import autodiff as ad
from gfe import flow, model

from conftest import QuadraticObjective, draw_clean_case


def unit_cfg(**kw):
    kw.setdefault("alpha_mode", "unit")
    return flow.FlowConfig(**kw)


class TestGrid:
    def test_endpoints_exact(self):
        cfg = flow.FlowConfig(tau=7.3, n_slices=33)
        ts = flow.make_log_grid(cfg)
        assert ts[0] == 0.0
        assert ts[-1] == 7.3
        assert len(ts) == 34

    def test_strictly_increasing_and_growing(self):
        ts = flow.make_log_grid(flow.FlowConfig(tau=5.0, n_slices=100))
        dts = np.diff(ts)
        assert np.all(dts > 0)
        assert np.all(np.diff(dts) > 0)  # slices widen monotonically

    def test_two_slice_value(self):
        # t_1 = tau * (sqrt(c) - 1) / (c - 1) = 1/11 for c = 100, tau = 1
        ts = flow.make_log_grid(flow.FlowConfig(tau=1.0, n_slices=2))
        assert ts[1] == pytest.approx(1.0 / 11.0, rel=1e-14)

    def test_alpha_schedules(self):
        cfg = flow.FlowConfig(tau=5.0)
        assert flow.alpha(0.0, cfg) == 1.0
        assert flow.alpha(5.0, cfg) == pytest.approx(np.exp(-2.0), rel=1e-14)
        assert flow.alpha(2.5, cfg) == pytest.approx(np.exp(-1.0), rel=1e-14)
        ucfg = unit_cfg()
        assert flow.alpha(0.0, ucfg) == 1.0
        assert flow.alpha(3.3, ucfg) == 1.0

    def test_config_validation(self):
        with pytest.raises(ValueError):
            flow.FlowConfig(tau=-1.0)
        with pytest.raises(ValueError):
            flow.FlowConfig(n_slices=1)
        with pytest.raises(ValueError):
            flow.FlowConfig(alpha_mode="linear")
        with pytest.raises(ValueError):
            flow.FlowConfig(beta=1.5)
        with pytest.raises(ValueError):
            flow.FlowConfig(s0=20.0, s_max=10.0)
        with pytest.raises(ValueError):
            flow.FlowConfig(kappa=0.5)


class TestFixedRk4:
    def test_linear_fixture_unit_alpha(self):
        # dz/dt = -(z - y) from 0 has the closed form y (1 - exp(-t))
        y = np.array([2.0, -1.0, 0.5])
        obj = QuadraticObjective(y)
        cfg = unit_cfg(tau=1.0, n_slices=100)
        z_star, traj = flow.solve_fixed_rk4(None, None, cfg, objective=obj)
        expect = y * (1.0 - np.exp(-1.0))
        assert np.linalg.norm(z_star - expect) < 1e-6
        np.testing.assert_array_equal(traj.z_star, z_star)
        assert traj.n_slices == 100

    def test_linear_fixture_decaying_alpha(self):
        # with alpha = exp(-2 t / tau) the exponent is the alpha integral
        y = np.array([1.5])
        cfg = flow.FlowConfig(tau=5.0, n_slices=100)
        z_star, _ = flow.solve_fixed_rk4(None, None, cfg, objective=QuadraticObjective(y))
        integral = 0.5 * cfg.tau * (1.0 - np.exp(-2.0))
        expect = y * (1.0 - np.exp(-integral))
        assert np.linalg.norm(z_star - expect) < 1e-6

    def test_fourth_order_convergence(self):
        y = np.array([3.0, -2.0])
        obj = QuadraticObjective(y, diag=[1.0, 2.0])
        exact = y * (1.0 - np.exp(-np.array([1.0, 2.0]) * 2.0))

        def err(n):
            cfg = unit_cfg(tau=2.0, n_slices=n)
            z, _ = flow.solve_fixed_rk4(None, None, cfg, objective=obj)
            return np.linalg.norm(z - exact)

        e1, e2 = err(8), err(16)
        assert e1 / e2 > 8.0  # a 4th-order method should gain ~16x

    def test_dead_network_stays_at_origin(self, rng):
        theta = model.init_params(1, (3, 5, 4))
        theta.weights[0][:] = 0.0  # loss no longer depends on z
        y = rng.uniform(0.2, 0.8, size=4)
        z_star, traj = flow.solve_fixed_rk4(y, theta, flow.FlowConfig())
        np.testing.assert_array_equal(z_star, np.zeros(3))
        np.testing.assert_array_equal(traj.zs, 0.0)

    def test_divergence_reports_slice(self):
        # unit step sizes against a stiff quadratic make RK4 blow up
        obj = QuadraticObjective(np.array([1.0]), diag=[1e6])
        cfg = unit_cfg(tau=5.0, n_slices=50)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(flow.SolverDivergence, match="slice"):
                flow.solve_fixed_rk4(None, None, cfg, objective=obj)

    def test_forward_pass_count(self, rng):
        theta, _, y = draw_clean_case(rng)
        c = ad.PassCounter()
        flow.solve_fixed_rk4(y, theta, flow.FlowConfig(n_slices=25), counter=c)
        assert c.passes == 8 * 25  # 4 gradient evals per slice, 2 passes each


class TestAdjointBackward:
    def test_costate_boundary_condition(self, rng):
        theta, _, y = draw_clean_case(rng)
        cfg = flow.FlowConfig(n_slices=30)
        _, traj = flow.solve_fixed_rk4(y, theta, cfg)
        obj = model.DecoderObjective(theta, y)
        _, _, lam_tau, _ = flow.adjoint_backward(y, theta, traj, return_costate=True)
        np.testing.assert_allclose(lam_tau, -obj.grad(traj.z_star), rtol=1e-12)

    def test_degenerate_horizon_reduces_to_direct(self, rng):
        # as tau -> 0 the latent never leaves 0 and the correction vanishes
        theta, _, y = draw_clean_case(rng)
        cfg = flow.FlowConfig(tau=1e-9, n_slices=2)
        _, traj = flow.solve_fixed_rk4(y, theta, cfg)
        loss, grads = flow.adjoint_backward(y, theta, traj)
        loss0, direct = flow.approx_backward(y, np.zeros(theta.latent_dim), theta)
        assert loss == pytest.approx(loss0, rel=1e-9)
        for a, b in zip(grads, direct):
            np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-9)

    def test_matches_end_to_end_fd(self, rng):
        """The exact backward pass against finite differences through the solver."""
        theta = model.init_params(17, (2, 4, 6))
        y = np.random.default_rng(17).uniform(0.2, 0.8, size=6)
        cfg = flow.FlowConfig(tau=5.0, n_slices=40)
        _, traj = flow.solve_fixed_rk4(y, theta, cfg)
        _, grads = flow.adjoint_backward(y, theta, traj)
        flat = np.concatenate([g.ravel() for g in grads])

        probe = np.random.default_rng(3)
        idx_all = probe.choice(flat.size, size=8, replace=False)
        h = 1e-6
        for idx in idx_all:
            def solved_loss(delta):
                th = theta.copy()
                block = 0
                off = idx
                arrays = th.arrays()
                while off >= arrays[block].size:
                    off -= arrays[block].size
                    block += 1
                arrays[block].flat[off] += delta
                zs, _ = flow.solve_fixed_rk4(y, th, cfg)
                return model.DecoderObjective(th, y).value(zs)

            fd = (solved_loss(h) - solved_loss(-h)) / (2.0 * h)
            denom = max(abs(fd), np.abs(flat).max(), 1e-12)
            assert abs(flat[idx] - fd) / denom < 1e-3

    def test_stale_parameters_rejected(self, rng):
        theta, _, y = draw_clean_case(rng)
        _, traj = flow.solve_fixed_rk4(y, theta, flow.FlowConfig(n_slices=5))
        theta.weights[0][0, 0] += 0.1
        with pytest.raises(ad.UsageError, match="stale"):
            flow.adjoint_backward(y, theta, traj)

    def test_config_mismatch_rejected(self, rng):
        theta, _, y = draw_clean_case(rng)
        cfg = flow.FlowConfig(n_slices=5)
        _, traj = flow.solve_fixed_rk4(y, theta, cfg)
        with pytest.raises(ad.UsageError, match="config"):
            flow.adjoint_backward(y, theta, traj, cfg=flow.FlowConfig(n_slices=6))

    def test_momentum_trajectory_rejected(self, rng):
        theta, _, y = draw_clean_case(rng)
        _, traj = flow.solve_nesterov(y, theta, flow.FlowConfig(n_slices=5))
        with pytest.raises(ad.UsageError, match="first-order"):
            flow.adjoint_backward(y, theta, traj)

    def test_exact_pass_counts(self, rng):
        theta, _, y = draw_clean_case(rng)
        n = 20
        cfg = flow.FlowConfig(n_slices=n)
        fwd = ad.PassCounter()
        _, traj = flow.solve_fixed_rk4(y, theta, cfg, counter=fwd)
        assert fwd.passes == 8 * n
        bwd = ad.PassCounter()
        flow.adjoint_backward(y, theta, traj, counter=bwd)
        # per slice: 4 Hessian products and 3 mixed products at 4 passes
        # each; plus boundary gradient and the direct term, 2 passes each
        assert bwd.passes == 28 * n + 4


class TestApproxBackward:
    def test_equals_frozen_param_gradient(self, rng):
        theta, z, y = draw_clean_case(rng)
        loss, grads = flow.approx_backward(y, z, theta)
        rec = model.decoder_record(theta, z, y, "bce")
        (tape,) = model.record_param_grads(rec, [theta])
        assert loss == pytest.approx(rec.output.value, rel=1e-12)
        for a, b in zip(grads, tape):
            np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-13)

    def test_cost_is_two_passes(self, rng):
        theta, z, y = draw_clean_case(rng)
        c = ad.PassCounter()
        flow.approx_backward(y, z, theta, counter=c)
        assert c.passes == 2


class TestNesterov:
    def test_zero_gradient_stays_put(self):
        obj = QuadraticObjective(np.zeros(3))
        z, traj = flow.solve_nesterov(None, None, unit_cfg(), objective=obj)
        np.testing.assert_array_equal(z, np.zeros(3))
        np.testing.assert_array_equal(traj.vs, 0.0)

    def test_oscillates_through_minimum(self):
        """From z=1 on a 1-D quadratic the damped momentum flow overshoots."""
        obj = QuadraticObjective(np.array([0.0]))
        cfg = unit_cfg(tau=8.0, n_slices=200)
        z, traj = flow.solve_nesterov(None, None, cfg, objective=obj, z0=[1.0])
        path = traj.zs[:, 0]
        assert path.min() < -1e-3  # crossed the minimum
        losses = 0.5 * path**2
        rises = np.diff(losses) > 1e-12
        assert rises.any()  # loss along the path is not monotone
        assert abs(z[0]) < 0.2  # but it still ends much closer than it began

    def test_matches_dense_reference_and_bessel(self):
        """Coarse-grid solve vs a fine uniform-step integration of the same ODE."""
        cfg = unit_cfg(tau=5.0, n_slices=100, eps=1e-3)
        obj = QuadraticObjective(np.array([0.0]))
        z, _ = flow.solve_nesterov(None, None, cfg, objective=obj, z0=[1.0])

        zd, vd = np.array([1.0]), np.array([0.0])
        h = 5e-4

        def rhs(t, zz, vv):
            return vv, -3.0 / (t + cfg.eps) * vv - zz

        t = 0.0
        for _ in range(10000):
            kz1, kv1 = rhs(t, zd, vd)
            kz2, kv2 = rhs(t + h / 2, zd + h / 2 * kz1, vd + h / 2 * kv1)
            kz3, kv3 = rhs(t + h / 2, zd + h / 2 * kz2, vd + h / 2 * kv2)
            kz4, kv4 = rhs(t + h, zd + h * kz3, vd + h * kv3)
            zd = zd + h / 6 * (kz1 + 2 * kz2 + 2 * kz3 + kz4)
            vd = vd + h / 6 * (kv1 + 2 * kv2 + 2 * kv3 + kv4)
            t += h
        assert abs(z[0] - zd[0]) < 1e-4

        # the eps-free ODE solves to 2 J1(t) / t; eps shifts it slightly
        from scipy.special import j1

        assert abs(zd[0] - 2.0 * j1(5.0) / 5.0) < 0.01

    def test_beats_plain_flow_on_stiff_quadratic(self):
        target = np.array([1.0, 1.0])
        diag = np.array([0.05, 1.0])
        cfg = unit_cfg(tau=20.0, n_slices=100)
        obj_a = QuadraticObjective(target, diag=diag)
        obj_b = QuadraticObjective(target, diag=diag)
        z_plain, _ = flow.solve_fixed_rk4(None, None, cfg, objective=obj_a)
        z_mom, _ = flow.solve_nesterov(None, None, cfg, objective=obj_b)
        assert obj_b.value(z_mom) < obj_a.value(z_plain)


class TestAmdStep:
    def test_identity_fixture_first_step(self):
        """Unit scale from the origin lands exactly on the target."""
        obj = QuadraticObjective(np.array([1.0, 0.0]))
        state = flow.LatentState(np.zeros(2), 0.0)
        cfg = unit_cfg()
        nxt, dt, scale, m = flow.amd_step(None, None, state, 1.0, cfg, objective=obj)
        assert m == 0
        assert dt == 1.0
        assert scale == 1.0
        np.testing.assert_array_equal(nxt.z, [1.0, 0.0])
        assert nxt.loss == 0.0
        assert obj.value(state.z) == 0.5

    def test_zero_gradient_signals_convergence(self):
        obj = QuadraticObjective(np.zeros(2))
        state = flow.LatentState(np.zeros(2), 0.0)
        nxt, dt, _, m = flow.amd_step(None, None, state, 1.0, unit_cfg(), objective=obj)
        assert m is None
        assert dt == 0.0
        np.testing.assert_array_equal(nxt.z, state.z)
        assert nxt.loss == 0.0

    def test_backtracks_on_overshoot(self):
        # 0.5 * 3 z^2 towards 1: dt = 1 and 0.75 overshoot, 0.5625 lands
        obj = QuadraticObjective(np.array([1.0]), diag=[3.0])
        state = flow.LatentState(np.zeros(1), 0.0)
        nxt, dt, _, m = flow.amd_step(None, None, state, 1.0, unit_cfg(), objective=obj)
        assert m == 2
        assert dt == pytest.approx(0.75**2)
        assert nxt.loss < 1.5

    def test_horizon_cap_tried_once(self):
        c = ad.PassCounter()
        obj = QuadraticObjective(np.array([1.0]), diag=[3.0], counter=c)
        state = flow.LatentState(np.zeros(1), 0.0)
        nxt, dt, _, m = flow.amd_step(
            None, None, state, 1.0, unit_cfg(), objective=obj, max_dt=0.9
        )
        # m=0 is clipped to 0.9 and rejected, m=1 (0.75) rejected, m=2 lands
        assert m == 2
        assert dt == pytest.approx(0.75**2)
        # value_and_grad (2) plus exactly three candidate evaluations
        assert c.passes == 5

    def test_time_advances_by_dt(self):
        obj = QuadraticObjective(np.array([4.0]))
        state = flow.LatentState(np.zeros(1), 1.25)
        nxt, dt, _, m = flow.amd_step(None, None, state, 0.5, unit_cfg(), objective=obj)
        assert m == 0
        assert nxt.t == pytest.approx(1.25 + dt)

    @given(
        st.floats(-5.0, 5.0),
        st.floats(-5.0, 5.0),
        st.floats(0.1, 10.0),
        st.floats(0.1, 10.0),
    )
    @settings(max_examples=50, deadline=None)
    def test_accepted_steps_always_decrease(self, t0, t1, d0, d1):
        obj = QuadraticObjective(np.array([t0, t1]), diag=[d0, d1])
        state = flow.LatentState(np.zeros(2), 0.0)
        loss0 = obj.value(state.z)
        nxt, dt, _, m = flow.amd_step(None, None, state, 1.0, unit_cfg(), objective=obj)
        if m is None:
            assert dt == 0.0
        else:
            assert nxt.loss < loss0
            assert 0.0 < dt <= 1.0


class TestSolveAmd:
    def test_identity_fixture_converges_fast(self):
        obj = QuadraticObjective(np.array([1.0, 0.0]))
        z, steps, curve = flow.solve_amd(None, None, unit_cfg(), objective=obj)
        assert steps <= 5
        assert np.linalg.norm(z - [1.0, 0.0]) < 1e-6
        assert curve[0] == 0.5
        assert curve[-1] == 0.0

    def test_requires_unit_schedule(self):
        obj = QuadraticObjective(np.array([1.0]))
        with pytest.raises(ad.UsageError, match="unit"):
            flow.solve_amd(None, None, flow.FlowConfig(), objective=obj)

    def test_curve_strictly_decreasing_on_decoder(self, rng):
        theta, _, y = draw_clean_case(rng)
        cfg = unit_cfg(tau=50.0, max_steps=40, conv_threshold=1e-9)
        _, steps, curve = flow.solve_amd(y, theta, cfg)
        assert steps >= 1
        assert all(b < a for a, b in zip(curve, curve[1:]))

    def test_scale_grows_geometrically(self):
        """Far from the optimum every unit-scale step is accepted, so the
        step sizes follow kappa**k up to the s_max clamp."""
        lines = []
        obj = QuadraticObjective(np.array([1e4]), diag=[0.01])
        cfg = unit_cfg(tau=1e6, max_steps=30, conv_threshold=1e-12)
        flow.solve_amd(None, None, cfg, objective=obj, diag=lines.append)
        dts = np.array([float(ln.split()[2]) for ln in lines])
        expect = np.minimum(1.1 ** np.arange(len(dts)), 10.0)
        np.testing.assert_allclose(dts, expect, rtol=1e-5)  # diag prints 6 digits
        ms = {int(ln.split()[3]) for ln in lines}
        assert ms == {0}

    def test_stops_at_horizon(self):
        obj = QuadraticObjective(np.array([1e4]), diag=[0.01])
        cfg = unit_cfg(tau=2.5, max_steps=50, conv_threshold=1e-12)
        lines = []
        z, steps, _ = flow.solve_amd(None, None, cfg, objective=obj, diag=lines.append)
        # dt = 1, 1.1, then 0.4 clipped to land exactly on tau
        assert steps == 3
        dts = [float(ln.split()[2]) for ln in lines]
        np.testing.assert_allclose(dts, [1.0, 1.1, 0.4], rtol=1e-12)
        expect = 0.0
        for dt in dts:
            expect = expect - dt * 0.01 * (expect - 1e4)
        assert z[0] == pytest.approx(expect, rel=1e-12)

    def test_plateau_stops_early(self):
        obj = QuadraticObjective(np.array([1.0]), diag=[1e-4])
        cfg = unit_cfg(tau=1e9, max_steps=100, conv_threshold=0.01)
        _, steps, curve = flow.solve_amd(None, None, cfg, objective=obj)
        assert steps < 100
        base, last = curve[-4], curve[-1]
        assert (base - last) / abs(base) < 0.01

    def test_max_steps_respected(self):
        obj = QuadraticObjective(np.array([1e4]), diag=[1e-5])
        cfg = unit_cfg(tau=1e9, max_steps=7, conv_threshold=1e-15)
        _, steps, curve = flow.solve_amd(None, None, cfg, objective=obj)
        assert steps == 7
        assert len(curve) == 8

    def test_needs_objective_or_pair(self):
        with pytest.raises(ad.UsageError):
            flow.solve_amd(None, None, unit_cfg())
