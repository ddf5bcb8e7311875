"""Latent-space solvers.

A sample is encoded by running gradient flow in latent space against a
frozen decoder: dz/dt = -alpha(t) * grad_z loss, z(0) = 0.  This module
holds the fixed-grid RK4 integrator for that flow, the exact backward
pass that differentiates through the whole solve, the cheap backward
that treats the solution as a constant, a momentum variant driven by a
time-damped second-order ODE, and an adaptive backtracking solver whose
every step is guaranteed to reduce the loss.

Solvers accept either (y, theta) pairs or a ready-made objective with
value / value_and_grad / latent_dim, so analytic fixtures can stand in
for the decoder in tests.
"""

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import UsageError
from .model import DecoderObjective, decoder_record


class SolverDivergence(RuntimeError):
    """A latent solve produced a non-finite state."""


@dataclass(frozen=True)
class FlowConfig:
    """Knobs shared by all latent solvers.

    tau/n_slices/alpha_mode drive the fixed-grid integrators; beta, s0,
    s_max, kappa, conv_threshold and max_steps drive the adaptive
    solver; eps regularizes the momentum damping term near t = 0.
    """

    tau: float = 5.0
    n_slices: int = 100
    alpha_mode: str = "exp_decay"
    beta: float = 0.75
    s0: float = 1.0
    s_max: float = 10.0
    kappa: float = 1.1
    eps: float = 1e-3
    conv_threshold: float = 0.01
    max_steps: int = 100

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.n_slices < 2:
            raise ValueError("need at least 2 grid slices")
        if self.alpha_mode not in ("exp_decay", "unit"):
            raise ValueError(f"unknown alpha_mode {self.alpha_mode!r}")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if not 0.0 < self.s0 <= self.s_max:
            raise ValueError("need 0 < s0 <= s_max")
        if self.kappa < 1.0:
            raise ValueError("kappa must be >= 1")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


class LatentState(NamedTuple):
    """Latent position at flow time t; v is only set by the momentum solver."""

    z: np.ndarray
    t: float
    v: Optional[np.ndarray] = None
    loss: Optional[float] = None


# Grid compression ratio: slice widths grow by a factor of c**(1/N) each
# step, so early slices (where the flow moves fastest) are the finest.
LOG_GRID_RATIO = 100.0

# Backtracking exponent cap for the adaptive solver.  Exhausting it means
# beta**60 * s ~ 3e-8 * s could not reduce the loss, which at double
# precision reads as "already at a minimum", so callers treat it as
# convergence instead of an error.
AMD_M_CAP = 60


def make_log_grid(cfg: FlowConfig):
    """Time grid 0 = t_0 < ... < t_N = tau with log-spaced, growing slices.

    t_i = tau * (c**(i/N) - 1) / (c - 1) with c = LOG_GRID_RATIO; the
    endpoints are pinned exactly.
    """
    i = np.arange(cfg.n_slices + 1, dtype=np.float64)
    c = LOG_GRID_RATIO
    ts = cfg.tau * (np.power(c, i / cfg.n_slices) - 1.0) / (c - 1.0)
    ts[0] = 0.0
    ts[-1] = cfg.tau
    return ts


def alpha(t, cfg: FlowConfig):
    """Flow-speed schedule: exp(-2 t / tau), or 1 in unit mode."""
    if cfg.alpha_mode == "unit":
        return np.ones_like(np.asarray(t, dtype=np.float64)) if np.ndim(t) else 1.0
    return np.exp(-2.0 * np.asarray(t, dtype=np.float64) / cfg.tau)


class Trajectory:
    """Stored states of one fixed-grid solve.

    Keeps the grid times, slice widths, latent states at every grid
    point and the flow derivative at each slice start; that is enough to
    rebuild the integrands of the exact backward pass.  A checksum of
    the parameters that produced it guards against replaying the
    backward pass under updated weights.
    """

    __slots__ = ("ts", "dts", "zs", "fs", "vs", "kind", "cfg", "theta_checksum")

    def __init__(self, ts, dts, zs, fs, vs, kind, cfg, theta_checksum):
        self.ts = ts
        self.dts = dts
        self.zs = zs
        self.fs = fs
        self.vs = vs
        self.kind = kind
        self.cfg = cfg
        self.theta_checksum = theta_checksum

    @property
    def z_star(self):
        return self.zs[-1]

    @property
    def n_slices(self):
        return len(self.dts)


def _make_objective(y, theta, kind, counter, objective):
    if objective is not None:
        return objective
    if y is None or theta is None:
        raise UsageError("need either an objective or a (y, theta) pair")
    return DecoderObjective(theta, y, kind=kind, counter=counter)


def _check_finite(z, i):
    if not np.all(np.isfinite(z)):
        raise SolverDivergence(
            f"non-finite latent state after slice {i}; "
            "the flow diverged on this sample"
        )


def solve_fixed_rk4(y, theta, cfg: FlowConfig, kind="bce", counter=None,
                    objective=None):
    """Integrate the latent gradient flow with classical RK4 on the log grid.

    Returns (z_star, trajectory).  Four gradient evaluations per slice;
    the slice-start derivative is stored for the backward pass.
    """
    obj = _make_objective(y, theta, kind, counter, objective)
    ts = make_log_grid(cfg)
    dts = np.diff(ts)
    n = obj.latent_dim
    zs = np.zeros((cfg.n_slices + 1, n))
    fs = np.zeros((cfg.n_slices, n))
    z = np.zeros(n)

    for i in range(cfg.n_slices):
        h = dts[i]
        t0 = ts[i]
        tm = t0 + 0.5 * h
        t1 = ts[i + 1]
        k1 = -alpha(t0, cfg) * obj.grad(z)
        k2 = -alpha(tm, cfg) * obj.grad(z + 0.5 * h * k1)
        k3 = -alpha(tm, cfg) * obj.grad(z + 0.5 * h * k2)
        k4 = -alpha(t1, cfg) * obj.grad(z + h * k3)
        fs[i] = k1
        z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        _check_finite(z, i)
        zs[i + 1] = z

    checksum = theta.checksum() if theta is not None else None
    traj = Trajectory(ts, dts, zs, fs, None, kind, cfg, checksum)
    return z.copy(), traj


def approx_backward(y, z_star, theta, kind="bce", counter=None):
    """Parameter gradient with the solved latent treated as a constant.

    Exactly the gradient of loss(y, D(z_star, theta)) at frozen z_star.
    Returns (loss, grads) with grads in [w0, b0, w1, b1, ...] order.
    """
    obj = DecoderObjective(theta, y, kind=kind, counter=counter)
    return obj.grad_params(z_star)


def _mixed_flat(record, lam, theta):
    """Mixed second-order parameter term, biases flattened to vectors."""
    raw = ad.mixed_grad_params(record, lam)
    out = []
    for i in range(len(theta.weights)):
        out.append(np.asarray(raw[2 * i]))
        out.append(np.asarray(raw[2 * i + 1]).reshape(-1))
    return out


def adjoint_backward(y, theta, traj: Trajectory, cfg: FlowConfig = None,
                     counter=None, return_costate=False):
    """Exact parameter gradient of the full solve-then-reconstruct map.

    Walks the stored trajectory backward, propagating the costate from
    its final value (the negated latent gradient at z_star) and
    accumulating the second-order correction integral slice by slice
    with Simpson's rule; mid-slice states come from cubic Hermite
    interpolation of the stored grid states.  The finite-difference
    tests pin the overall sign conventions.

    Returns (loss, grads) or, with return_costate, (loss, grads,
    costate_at_tau, costate_at_zero).
    """
    if traj.vs is not None:
        raise UsageError("exact backward is defined for the first-order flow only")
    if theta is None or traj.theta_checksum != theta.checksum():
        raise UsageError(
            "trajectory is stale: it was computed under different parameters"
        )
    if cfg is not None:
        if (cfg.n_slices != traj.cfg.n_slices or cfg.tau != traj.cfg.tau
                or cfg.alpha_mode != traj.cfg.alpha_mode):
            raise UsageError("config does not match the one used for the forward solve")
    cfg = traj.cfg
    kind = traj.kind
    obj = DecoderObjective(theta, y, kind=kind, counter=counter)

    z_star = traj.zs[-1]
    loss, g_star = obj.value_and_grad(z_star)
    lam = -g_star
    f_next = -alpha(traj.ts[-1], cfg) * g_star

    _, direct = obj.grad_params(z_star)
    corr = [np.zeros_like(p) for p in direct]

    def hvp(z, vec):
        rec = decoder_record(theta, z, obj.y, kind, counter)
        return ad.hessian_vector_latent(rec, vec)

    def mixed(z, vec):
        rec = decoder_record(theta, z, obj.y, kind, counter)
        return _mixed_flat(rec, vec, theta)

    lam0 = lam.copy()
    for i in range(traj.n_slices - 1, -1, -1):
        h = traj.dts[i]
        t0 = traj.ts[i]
        t1 = traj.ts[i + 1]
        tm = t0 + 0.5 * h
        a0, am, a1 = alpha(t0, cfg), alpha(tm, cfg), alpha(t1, cfg)
        z0, z1 = traj.zs[i], traj.zs[i + 1]
        f0 = traj.fs[i]
        z_mid = 0.5 * (z0 + z1) + (h / 8.0) * (f0 - f_next)

        # Costate RK4, marching in reversed time from t1 down to t0.
        k1 = -a1 * hvp(z1, lam)
        k2 = -am * hvp(z_mid, lam + 0.5 * h * k1)
        k3 = -am * hvp(z_mid, lam + 0.5 * h * k2)
        k4 = -a0 * hvp(z0, lam + h * k3)
        lam_next = lam + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        lam_mid = 0.5 * (lam + lam_next) + (h / 8.0) * (k1 - k4)

        w1 = mixed(z1, lam)
        wm = mixed(z_mid, lam_mid)
        w0 = mixed(z0, lam_next)
        for j in range(len(corr)):
            corr[j] += (h / 6.0) * (a1 * w1[j] + 4.0 * am * wm[j] + a0 * w0[j])

        lam = lam_next
        if not np.all(np.isfinite(lam)):
            raise SolverDivergence(
                f"non-finite costate after slice {i}; backward pass diverged"
            )
        f_next = f0

    grads = [d + c for d, c in zip(direct, corr)]
    if return_costate:
        return float(loss), grads, lam0, lam
    return float(loss), grads


def solve_nesterov(y, theta, cfg: FlowConfig, kind="bce", counter=None,
                   objective=None, z0=None, v0=None):
    """Integrate the time-damped second-order flow on the fixed grid.

    The system is dz/dt = v, dv/dt = -(3/(t+eps)) v - grad_z loss, both
    started at zero, which front-loads progress per unit time compared
    with the plain first-order flow.  z0/v0 override the start state for
    analytic fixtures.  Returns (z_star, trajectory).
    """
    obj = _make_objective(y, theta, kind, counter, objective)
    ts = make_log_grid(cfg)
    dts = np.diff(ts)
    n = obj.latent_dim
    z = np.zeros(n) if z0 is None else np.asarray(z0, dtype=np.float64).copy()
    v = np.zeros(n) if v0 is None else np.asarray(v0, dtype=np.float64).copy()
    zs = np.zeros((cfg.n_slices + 1, n))
    vs = np.zeros((cfg.n_slices + 1, n))
    fs = np.zeros((cfg.n_slices, n))
    zs[0], vs[0] = z, v

    def damp(t):
        return 3.0 / (t + cfg.eps)

    for i in range(cfg.n_slices):
        h = dts[i]
        t0 = ts[i]
        tm = t0 + 0.5 * h
        t1 = ts[i + 1]

        kz1 = v
        kv1 = -damp(t0) * v - obj.grad(z)
        kz2 = v + 0.5 * h * kv1
        kv2 = -damp(tm) * kz2 - obj.grad(z + 0.5 * h * kz1)
        kz3 = v + 0.5 * h * kv2
        kv3 = -damp(tm) * kz3 - obj.grad(z + 0.5 * h * kz2)
        kz4 = v + h * kv3
        kv4 = -damp(t1) * kz4 - obj.grad(z + h * kz3)

        fs[i] = kz1
        z = z + (h / 6.0) * (kz1 + 2.0 * kz2 + 2.0 * kz3 + kz4)
        v = v + (h / 6.0) * (kv1 + 2.0 * kv2 + 2.0 * kv3 + kv4)
        _check_finite(z, i)
        _check_finite(v, i)
        zs[i + 1], vs[i + 1] = z, v

    checksum = theta.checksum() if theta is not None else None
    traj = Trajectory(ts, dts, zs, fs, vs, kind, cfg, checksum)
    return z.copy(), traj


def amd_step(y, theta, state: LatentState, scale, cfg: FlowConfig,
             kind="bce", counter=None, objective=None, max_dt=None):
    """One adaptive step: largest trial dt = scale * beta**m that reduces loss.

    Tries m = 0, 1, ... up to AMD_M_CAP and takes the first candidate
    z - dt * grad whose loss strictly decreases.  max_dt clips trial
    steps (used to land exactly on the time horizon).  Returns
    (next_state, dt, scale, m); m is None when no candidate qualifies,
    which callers treat as convergence.
    """
    obj = _make_objective(y, theta, kind, counter, objective)
    z = np.asarray(state.z, dtype=np.float64)
    loss0, g = obj.value_and_grad(z)
    if not np.all(np.isfinite(g)):
        raise SolverDivergence("non-finite gradient in adaptive step")
    if not np.any(g):
        return state._replace(loss=loss0), 0.0, scale, None

    tried_cap = False
    for m in range(AMD_M_CAP + 1):
        dt = scale * cfg.beta ** m
        if max_dt is not None and dt > max_dt:
            if tried_cap:
                continue
            dt = max_dt
            tried_cap = True
        cand = z - dt * g
        loss_c = obj.value(cand)
        if loss_c < loss0:
            nxt = LatentState(cand, state.t + dt, None, float(loss_c))
            return nxt, dt, scale, m
    return state._replace(loss=loss0), 0.0, scale, None


def solve_amd(y, theta, cfg: FlowConfig, kind="bce", counter=None,
              objective=None, diag=None):
    """Adaptive solve from z = 0 until the loss curve flattens.

    Steps via amd_step with the scale grown by kappa after each accepted
    step (clamped to [s0, s_max]).  Stops when a step fails, the time
    horizon tau is reached, the relative loss decrease over the last 3
    accepted steps drops below conv_threshold, or max_steps is hit.
    Returns (z_star, steps_taken, loss_curve); the curve starts with the
    initial loss and is strictly decreasing.  diag, if given, is called
    with one text line per accepted step: "step t dt m loss".
    """
    if cfg.alpha_mode != "unit":
        raise UsageError("the adaptive solver runs with the unit flow-speed schedule")
    obj = _make_objective(y, theta, kind, counter, objective)
    n = obj.latent_dim
    state = LatentState(np.zeros(n), 0.0)
    curve = [float(obj.value(state.z))]
    scale = cfg.s0
    steps = 0

    while steps < cfg.max_steps:
        remaining = cfg.tau - state.t
        if remaining <= 0:
            break
        nxt, dt, scale, m = amd_step(
            None, None, state, scale, cfg, objective=obj, max_dt=remaining
        )
        if m is None:
            break
        state = nxt
        steps += 1
        curve.append(state.loss)
        if diag is not None:
            diag(f"{steps} {state.t:.6g} {dt:.6g} {m} {state.loss:.10g}")
        if state.t >= cfg.tau - 1e-12:
            break
        if len(curve) >= 4:
            base = curve[-4]
            slope = (base - curve[-1]) / max(abs(base), 1e-30)
            if slope < cfg.conv_threshold:
                break
        scale = min(max(cfg.kappa * scale, cfg.s0), cfg.s_max)

    return state.z.copy(), steps, curve
