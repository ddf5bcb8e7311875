"""Shared test helpers: analytic objectives and small random networks."""

import os

import numpy as np
import pytest

from gfe import data, model


class QuadraticObjective:
    """0.5 * (z - target)^T A (z - target) with diagonal A (1 by default).

    With A = I this is the identity-decoder L2 fixture: the loss surface
    a decoder would induce if it simply returned z, under half squared
    distance.  Implements the small objective protocol the solvers
    accept (latent_dim / value / value_and_grad / grad) and counts
    evaluations like the real objective does.
    """

    def __init__(self, target, diag=None, counter=None):
        self.target = np.asarray(target, dtype=np.float64)
        self.diag = np.ones_like(self.target) if diag is None else np.asarray(diag)
        self.latent_dim = self.target.size
        self.counter = counter

    def _charge(self, n):
        if self.counter is not None:
            self.counter.add(n)

    def value(self, z):
        self._charge(1)
        d = np.asarray(z) - self.target
        return 0.5 * float(d @ (self.diag * d))

    def value_and_grad(self, z):
        self._charge(2)
        d = np.asarray(z) - self.target
        return 0.5 * float(d @ (self.diag * d)), self.diag * d

    def grad(self, z):
        return self.value_and_grad(z)[1]


def random_theta(rng, min_width=2, max_width=6, n_layers=None):
    """A small random decoder with random widths."""
    if n_layers is None:
        n_layers = int(rng.integers(1, 4))
    widths = tuple(int(rng.integers(min_width, max_width + 1))
                   for _ in range(n_layers + 1))
    return model.init_params(int(rng.integers(0, 2**31)), widths)


def away_from_kinks(theta, z, margin=1e-3):
    """True when no hidden preactivation sits near the ELU kink.

    Finite-difference probes straddling the kink see the one-sided
    derivative mismatch, so oracle tests redraw such samples.
    """
    a = np.asarray(z, dtype=np.float64)
    for i, (w, b) in enumerate(zip(theta.weights, theta.biases)):
        pre = w @ a + b
        if i < len(theta.weights) - 1:
            if np.min(np.abs(pre)) < margin:
                return False
            a = np.where(pre >= 0.0, pre, np.exp(np.minimum(pre, 0.0)) - 1.0)
    return True


def draw_clean_case(rng, **kw):
    """(theta, z, y) with preactivations clear of kinks."""
    for _ in range(50):
        theta = random_theta(rng, **kw)
        z = rng.normal(scale=0.8, size=theta.latent_dim)
        if away_from_kinks(theta, z):
            y = rng.uniform(0.1, 0.9, size=theta.output_dim)
            return theta, z, y
    raise RuntimeError("could not draw a kink-free case")


def mnist_dir():
    """Directory containing MNIST IDX files, or None if unavailable."""
    candidates = []
    env = os.environ.get("GFE_DATA_DIR")
    if env:
        candidates.append(env)
    here = os.path.dirname(__file__)
    candidates.append(os.path.join(here, "data"))
    candidates.append(os.path.join(here, "..", "data"))
    for d in candidates:
        if not d or not os.path.isdir(d):
            continue
        img = os.path.join(d, data.TRAIN_IMAGES)
        if os.path.exists(img) or os.path.exists(img + ".gz"):
            return d
    return None


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
