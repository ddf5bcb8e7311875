"""Pure-numpy decoder kernels: the fallback backend.

Implements the same surface as the compiled extension: fused forward /
loss / gradient evaluations of the affine+ELU stack with sigmoid output.
Semantics (branch conventions, clamp masks) must match gfe.autodiff's
composite layers exactly; the parity tests pin the two together.
"""

from __future__ import annotations

import numpy as np

BACKEND = "reference"

LOSS_BCE = 0
LOSS_L2 = 1

BCE_FLOOR = 1e-12


def _elu(s):
    return np.where(s >= 0.0, s, np.exp(np.minimum(s, 0.0)) - 1.0)


def _elu_grad(s):
    return np.where(s >= 0.0, 1.0, np.exp(np.minimum(s, 0.0)))


def _sigmoid(s):
    out = np.empty_like(s)
    pos = s >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    e = np.exp(s[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class DecoderCore:
    """Decoder bound to one parameter set; read-only and shareable."""

    def __init__(self, weights, biases):
        if len(weights) != len(biases) or not weights:
            raise ValueError("need one bias per weight matrix")
        self.weights = [np.ascontiguousarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.ascontiguousarray(b, dtype=np.float64) for b in biases]
        self.widths = tuple([self.weights[0].shape[1]] + [w.shape[0] for w in self.weights])

    @property
    def latent_dim(self):
        return self.widths[0]

    @property
    def output_dim(self):
        return self.widths[-1]

    def _forward(self, z):
        """Returns (activations, preacts, yhat); activations[0] is z."""
        acts = [np.asarray(z, dtype=np.float64)]
        pres = []
        a = acts[0]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            s = w @ a + b
            pres.append(s)
            a = _sigmoid(s) if i == last else _elu(s)
            acts.append(a)
        return acts, pres, a

    def decode(self, z):
        return self._forward(z)[2]

    def _loss_from(self, yhat, y, kind):
        if kind == LOSS_BCE:
            c = np.clip(yhat, BCE_FLOOR, 1.0 - BCE_FLOOR)
            return float(-(y * np.log(c) + (1.0 - y) * np.log(1.0 - c)).mean())
        d = yhat - y
        return float(d @ d)

    def loss(self, z, y, kind):
        return self._loss_from(self._forward(z)[2], np.asarray(y, dtype=np.float64), kind)

    def _output_delta(self, yhat, y, kind):
        """dLoss / d(final preactivation)."""
        if kind == LOSS_BCE:
            mask = (yhat >= BCE_FLOOR) & (yhat <= 1.0 - BCE_FLOOR)
            return np.where(mask, yhat - y, 0.0) / y.size
        return 2.0 * (yhat - y) * yhat * (1.0 - yhat)

    def loss_grad_z(self, z, y, kind):
        y = np.asarray(y, dtype=np.float64)
        acts, pres, yhat = self._forward(z)
        loss = self._loss_from(yhat, y, kind)
        delta = self._output_delta(yhat, y, kind)
        for i in range(len(self.weights) - 1, 0, -1):
            delta = self.weights[i].T @ delta
            delta = delta * _elu_grad(pres[i - 1])
        gz = self.weights[0].T @ delta
        return loss, gz

    def loss_grad_theta(self, z, y, kind):
        """Returns (loss, grads) with grads flat as [gW0, gb0, gW1, gb1, ...]."""
        y = np.asarray(y, dtype=np.float64)
        acts, pres, yhat = self._forward(z)
        loss = self._loss_from(yhat, y, kind)
        delta = self._output_delta(yhat, y, kind)
        grads = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            grads[2 * i] = np.outer(delta, acts[i])
            grads[2 * i + 1] = delta.copy()
            if i > 0:
                delta = self.weights[i].T @ delta
                delta = delta * _elu_grad(pres[i - 1])
        return loss, grads
