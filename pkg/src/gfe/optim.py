"""Parameter update rules: RMSprop and bias-corrected Adam.

Both operate on flat parameter lists ([w0, b0, w1, b1, ...]) so the
same code serves decoder-only and encoder+decoder training.  Updates
are functional in the parameters (new arrays returned) and in-place in
the accumulator state.
"""

from dataclasses import dataclass, field
from typing import List

import numpy as np


def _check_grads(params, grads, who):
    if len(params) != len(grads):
        raise ValueError(f"{who}: {len(grads)} gradients for {len(params)} parameters")
    for i, (p, g) in enumerate(zip(params, grads)):
        if np.shape(p) != np.shape(g):
            raise ValueError(
                f"{who}: gradient {i} has shape {np.shape(g)}, "
                f"parameter has {np.shape(p)}"
            )
        if not np.all(np.isfinite(g)):
            raise ValueError(
                f"{who}: non-finite gradient in block {i}; update rejected"
            )


@dataclass
class RMSPropState:
    """Second-moment accumulator state."""

    lr: float = 0.0005
    alpha: float = 0.9
    eps: float = 1e-6
    step: int = 0
    v: List[np.ndarray] = field(default_factory=list)

    def ensure(self, params):
        if not self.v:
            self.v = [np.zeros_like(p) for p in params]


@dataclass
class AdamState:
    """First/second-moment accumulators plus the step counter."""

    lr: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    def ensure(self, params):
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]


def rmsprop_update(params, grads, state: RMSPropState):
    """v <- a v + (1-a) g^2; p <- p - lr g / (sqrt(v) + eps)."""
    _check_grads(params, grads, "rmsprop")
    state.ensure(params)
    out = []
    for p, g, v in zip(params, grads, state.v):
        v *= state.alpha
        v += (1.0 - state.alpha) * g * g
        out.append(p - state.lr * g / (np.sqrt(v) + state.eps))
    state.step += 1
    return out, state


def adam_update(params, grads, state: AdamState):
    """Standard Adam with bias correction."""
    _check_grads(params, grads, "adam")
    state.ensure(params)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    out = []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        mhat = m / c1
        vhat = v / c2
        out.append(p - state.lr * mhat / (np.sqrt(vhat) + state.eps))
    return out, state


def make_optimizer(name: str, lr: float = 0.0005):
    """Build a fresh state plus its update function by name."""
    if name == "rmsprop":
        return RMSPropState(lr=lr), rmsprop_update
    if name == "adam":
        return AdamState(lr=lr), adam_update
    raise ValueError(f"unknown optimizer {name!r}")


def state_to_blob(state):
    """Checkpoint form: (name, step, arrays).  Hyperparameters ride first.

    Accumulators are copied so the blob stays valid if training continues
    after the snapshot.
    """
    if isinstance(state, RMSPropState):
        hyper = np.array([state.lr, state.alpha, state.eps])
        return "rmsprop", state.step, [hyper] + [v.copy() for v in state.v]
    if isinstance(state, AdamState):
        hyper = np.array([state.lr, state.beta1, state.beta2, state.eps])
        return (
            "adam",
            state.step,
            [hyper] + [m.copy() for m in state.m] + [v.copy() for v in state.v],
        )
    raise ValueError(f"unknown optimizer state {type(state).__name__}")


def state_from_blob(blob):
    """Inverse of state_to_blob; the revived state owns its arrays."""
    name, step, arrays = blob
    if name == "rmsprop":
        lr, a, eps = arrays[0]
        return RMSPropState(
            lr=lr, alpha=a, eps=eps, step=step,
            v=[np.array(v) for v in arrays[1:]],
        )
    if name == "adam":
        lr, b1, b2, eps = arrays[0]
        rest = [np.array(a) for a in arrays[1:]]
        half = len(rest) // 2
        return AdamState(
            lr=lr, beta1=b1, beta2=b2, eps=eps, step=step,
            m=rest[:half], v=rest[half:],
        )
    raise ValueError(f"unknown optimizer name {name!r} in checkpoint")
