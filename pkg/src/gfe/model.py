"""Decoder and encoder networks plus the reconstruction losses.

The decoder maps a latent vector through a chain of affine layers with
ELU activations in between and a sigmoid at the end, so every output
pixel lands in (0, 1).  The encoder (used only by the conventional
autoencoder baseline) runs the mirror-image stack and leaves its final
layer linear.  Widths default to 32 -> 64 -> 128 -> 256 -> 784 but any
chain is accepted, which keeps tiny test fixtures cheap.
"""

import struct
from typing import NamedTuple, Optional

import numpy as np

from . import autodiff as ad
from . import _kernels
from ._kernels import LOSS_BCE, LOSS_L2, make_core

DEFAULT_LATENT_DIM = 32
DEFAULT_IMAGE_SHAPE = (28, 28)
DEFAULT_DECODER_WIDTHS = (32, 64, 128, 256, 784)

LOSS_KINDS = {"bce": LOSS_BCE, "l2": LOSS_L2}


class Sample(NamedTuple):
    """One training item: a flat intensity vector in [0,1] and its class."""

    image: np.ndarray
    label: int


def _check_stack(weights, biases, what):
    if len(weights) == 0 or len(weights) != len(biases):
        raise ValueError(f"{what}: need one bias vector per weight matrix")
    for i, (w, b) in enumerate(zip(weights, biases)):
        if w.ndim != 2 or b.ndim != 1 or b.shape[0] != w.shape[0]:
            raise ValueError(f"{what}: layer {i} has shapes {w.shape} / {b.shape}")
        if i > 0 and w.shape[1] != weights[i - 1].shape[0]:
            raise ValueError(
                f"{what}: layer {i} expects {w.shape[1]} inputs, "
                f"previous layer emits {weights[i - 1].shape[0]}"
            )
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise ValueError(f"{what}: layer {i} contains non-finite values")


class _ParamStack:
    def __init__(self, weights, biases):
        self.weights = [np.ascontiguousarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.ascontiguousarray(b, dtype=np.float64) for b in biases]
        _check_stack(self.weights, self.biases, type(self).__name__)

    @property
    def widths(self):
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    def arrays(self):
        """Flat parameter list [w0, b0, w1, b1, ...]; optimizer order."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def set_arrays(self, arrays):
        """Replace parameters in place from a flat [w0, b0, ...] list."""
        if len(arrays) != 2 * len(self.weights):
            raise ValueError("flat parameter list has the wrong length")
        for i in range(len(self.weights)):
            w = np.asarray(arrays[2 * i], dtype=np.float64)
            b = np.asarray(arrays[2 * i + 1], dtype=np.float64)
            if w.shape != self.weights[i].shape or b.shape != self.biases[i].shape:
                raise ValueError(f"layer {i}: shape mismatch in set_arrays")
            self.weights[i] = np.ascontiguousarray(w)
            self.biases[i] = np.ascontiguousarray(b)

    def copy(self):
        return type(self)(
            [w.copy() for w in self.weights], [b.copy() for b in self.biases]
        )

    def checksum(self):
        """Cheap content hash, used to detect stale cached state."""
        import zlib

        acc = 0
        for a in self.arrays():
            acc = zlib.crc32(a.tobytes(), acc)
        return acc


class DecoderParams(_ParamStack):
    """Weights/biases of the decoder; sigmoid on the last layer."""

    @property
    def latent_dim(self):
        return self.widths[0]

    @property
    def output_dim(self):
        return self.widths[-1]


class EncoderParams(_ParamStack):
    """Weights/biases of the baseline encoder; last layer stays linear."""

    @property
    def latent_dim(self):
        return self.widths[-1]

    @property
    def input_dim(self):
        return self.widths[0]


def _init_stack(rng, widths):
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        lim = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return weights, biases


def init_params(seed: int, widths=DEFAULT_DECODER_WIDTHS) -> DecoderParams:
    """Seed-deterministic decoder init: uniform +-sqrt(6/fan_in), zero bias."""
    if len(widths) < 2:
        raise ValueError("need at least an input and an output width")
    rng = np.random.default_rng(seed)
    return DecoderParams(*_init_stack(rng, widths))


def init_encoder_params(seed: int, widths=None) -> EncoderParams:
    """Encoder init; defaults to the decoder width chain reversed.

    A different stream is drawn from the same generator family by
    offsetting the seed, so encoder and decoder never share weights.
    """
    if widths is None:
        widths = tuple(reversed(DEFAULT_DECODER_WIDTHS))
    if len(widths) < 2:
        raise ValueError("need at least an input and an output width")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    return EncoderParams(*_init_stack(rng, widths))


# ---------------------------------------------------------------------------
# Plain numpy forward passes (dumps, sanity checks, the encoder baseline).
# ---------------------------------------------------------------------------


def decode(z, theta: DecoderParams):
    """Run the decoder on one latent vector; returns pixels in (0, 1)."""
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    if z.shape[0] != theta.latent_dim:
        raise ValueError(
            f"latent has dimension {z.shape[0]}, decoder expects {theta.latent_dim}"
        )
    return make_core(theta.weights, theta.biases, backend="reference").decode(z)


def encode(y, phi: EncoderParams):
    """Run the baseline encoder; the final layer is affine with no squashing."""
    a = np.asarray(y, dtype=np.float64).reshape(-1)
    if a.shape[0] != phi.input_dim:
        raise ValueError(
            f"input has dimension {a.shape[0]}, encoder expects {phi.input_dim}"
        )
    last = len(phi.weights) - 1
    for i, (w, b) in enumerate(zip(phi.weights, phi.biases)):
        a = w @ a + b
        if i < last:
            a = np.where(a >= 0.0, a, np.exp(np.minimum(a, 0.0)) - 1.0)
    return a


def bce_loss(y, yhat) -> float:
    """Pixel-averaged Bernoulli cross-entropy with clamped predictions."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {yhat.shape}")
    c = np.clip(yhat, _kernels.BCE_FLOOR, 1.0 - _kernels.BCE_FLOOR)
    return float(-np.mean(y * np.log(c) + (1.0 - y) * np.log(1.0 - c)))


def l2_loss(y, yhat) -> float:
    """Squared Euclidean distance between target and reconstruction."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {yhat.shape}")
    d = (yhat - y).ravel()
    return float(d @ d)


# ---------------------------------------------------------------------------
# Tape-recorded forward passes.
# ---------------------------------------------------------------------------


def _stack_forward(x_node, param_nodes, final):
    """Run an affine stack on the tape; `final` is "sigmoid" or "linear"."""
    a = x_node
    n_layers = len(param_nodes) // 2
    for i in range(n_layers):
        a = ad.affine(a, param_nodes[2 * i], param_nodes[2 * i + 1])
        if i < n_layers - 1:
            a = ad.elu(a)
    if final == "sigmoid":
        a = ad.sigmoid(a)
    return a


def _param_leaves(stack):
    nodes = []
    for w, b in zip(stack.weights, stack.biases):
        nodes.append(ad.Node(w))
        nodes.append(ad.Node(b.reshape(1, -1)))
    return nodes


def _loss_node(kind, y_row, yhat_node):
    if kind == "bce":
        return ad.bce(y_row, yhat_node)
    if kind == "l2":
        return ad.l2(y_row, yhat_node)
    raise ValueError(f"unknown loss kind {kind!r}")


def decoder_record(theta: DecoderParams, z, y, kind="bce", counter=None):
    """Record loss(y, D(z, theta)) on the tape; z is a differentiable leaf."""
    z = np.asarray(z, dtype=np.float64).reshape(1, -1)
    if z.shape[1] != theta.latent_dim:
        raise ValueError(
            f"latent has dimension {z.shape[1]}, decoder expects {theta.latent_dim}"
        )
    y = np.asarray(y, dtype=np.float64).reshape(1, -1)
    z_node = ad.Node(z)
    p_nodes = _param_leaves(theta)
    yhat = _stack_forward(z_node, p_nodes, "sigmoid")
    out = _loss_node(kind, y, yhat)
    return ad.ComputationRecord(z_node, p_nodes, out, counter)


def ae_record(phi: EncoderParams, theta: DecoderParams, y_batch, kind="bce", counter=None):
    """Record the autoencoder batch loss sum_m loss(y_m, D(E(y_m))).

    The record's latent slot is the encoder output (a batch of rows), so
    the same gradient entry points work; parameters are the encoder's
    followed by the decoder's.
    """
    y = np.asarray(y_batch, dtype=np.float64)
    if y.ndim == 1:
        y = y.reshape(1, -1)
    if y.shape[1] != phi.input_dim:
        raise ValueError(
            f"input has dimension {y.shape[1]}, encoder expects {phi.input_dim}"
        )
    enc_nodes = _param_leaves(phi)
    dec_nodes = _param_leaves(theta)
    z_node = _stack_forward(ad.Node(y), enc_nodes, "linear")
    yhat = _stack_forward(z_node, dec_nodes, "sigmoid")
    out = _loss_node(kind, y, yhat)
    return ad.ComputationRecord(z_node, enc_nodes + dec_nodes, out, counter)


def record_param_grads(record, stacks):
    """Pull parameter gradients out of a record as per-stack flat lists.

    `stacks` lists the parameter containers in the order their leaves
    were recorded.  Bias gradients come back as (n,) vectors matching
    the containers, not the (1, n) tape rows.
    """
    raw = ad.grad_wrt_params(record)
    out, pos = [], 0
    for stack in stacks:
        take = 2 * len(stack.weights)
        chunk = raw[pos : pos + take]
        pos += take
        flat = []
        for i in range(len(stack.weights)):
            flat.append(np.asarray(chunk[2 * i]))
            flat.append(np.asarray(chunk[2 * i + 1]).reshape(-1))
        out.append(flat)
    return out


class DecoderObjective:
    """Per-sample view of the loss surface z -> loss(y, D(z, theta)).

    Wraps a kernel core for the cheap entry points and falls back to the
    tape only when a differentiable record is needed.  Every evaluation
    is charged to the shared pass counter: forward 1, gradient sweep 1
    more, second-order sweeps 2 more.  Instances are read-only and safe
    to share across threads.
    """

    def __init__(self, theta: DecoderParams, y, kind="bce", counter=None, core=None):
        if kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {kind!r}")
        self.theta = theta
        self.y = np.asarray(y, dtype=np.float64).reshape(-1)
        if self.y.shape[0] != theta.output_dim:
            raise ValueError(
                f"target has dimension {self.y.shape[0]}, "
                f"decoder emits {theta.output_dim}"
            )
        self.kind = kind
        self.counter = counter
        self.core = core if core is not None else make_core(theta.weights, theta.biases)
        self._kind_code = LOSS_KINDS[kind]

    @property
    def latent_dim(self):
        return self.theta.latent_dim

    def _charge(self, n):
        if self.counter is not None:
            self.counter.add(n)

    def value(self, z) -> float:
        self._charge(1)
        return float(self.core.loss(z, self.y, self._kind_code))

    def value_and_grad(self, z):
        self._charge(2)
        loss, gz = self.core.loss_grad_z(z, self.y, self._kind_code)
        return float(loss), gz

    def grad(self, z):
        return self.value_and_grad(z)[1]

    def grad_params(self, z):
        """Loss and parameter gradient [gw0, gb0, ...] at fixed z."""
        self._charge(2)
        loss, grads = self.core.loss_grad_theta(z, self.y, self._kind_code)
        return float(loss), grads

    def record(self, z):
        """Tape record at z, for second-order products; costs one pass."""
        return decoder_record(self.theta, z, self.y, self.kind, self.counter)


# ---------------------------------------------------------------------------
# Checkpoints: versioned little-endian binary, magic + tagged sections.
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"GFECKPT1"

_SEC_DECODER = 1
_SEC_ENCODER = 2
_SEC_OPT = 3
_SEC_META = 4


def _pack_stack(stack):
    widths = stack.widths
    parts = [struct.pack("<I", len(widths))]
    parts.append(struct.pack("<%dI" % len(widths), *widths))
    for w, b in zip(stack.weights, stack.biases):
        parts.append(np.ascontiguousarray(w).tobytes())
        parts.append(np.ascontiguousarray(b).tobytes())
    return b"".join(parts)


def _unpack_stack(buf, off, cls):
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    widths = struct.unpack_from("<%dI" % n, buf, off)
    off += 4 * n
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        nw = fan_out * fan_in * 8
        weights.append(
            np.frombuffer(buf, dtype="<f8", count=fan_out * fan_in, offset=off)
            .reshape(fan_out, fan_in)
            .copy()
        )
        off += nw
        biases.append(np.frombuffer(buf, dtype="<f8", count=fan_out, offset=off).copy())
        off += fan_out * 8
    return cls(weights, biases), off


def _pack_str(s):
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _unpack_str(buf, off):
    (n,) = struct.unpack_from("<H", buf, off)
    off += 2
    return buf[off : off + n].decode("utf-8"), off + n


def _pack_opt(name, step, arrays):
    parts = [_pack_str(name), struct.pack("<QI", step, len(arrays))]
    for a in arrays:
        a = np.ascontiguousarray(a, dtype=np.float64)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack("<%dI" % max(a.ndim, 1), *(a.shape or (0,))))
        parts.append(a.tobytes())
    return b"".join(parts)


def _unpack_opt(buf, off):
    name, off = _unpack_str(buf, off)
    step, count = struct.unpack_from("<QI", buf, off)
    off += 12
    arrays = []
    for _ in range(count):
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from("<%dI" % max(ndim, 1), buf, off)
        off += 4 * max(ndim, 1)
        shape = shape[:ndim]
        n = int(np.prod(shape)) if ndim else 1
        arrays.append(
            np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        )
        off += 8 * n
    return (name, step, arrays), off


def save_checkpoint(path, decoder: DecoderParams, encoder: Optional[EncoderParams] = None,
                    opt=None, meta=None):
    """Write a checkpoint file.

    opt is an optional (name, step, arrays) triple; meta an optional
    dict of short strings.  Layout: 8-byte magic, little-endian u32
    section count, then tagged sections (u8 tag + u32 payload length).
    """
    sections = [(_SEC_DECODER, _pack_stack(decoder))]
    if encoder is not None:
        sections.append((_SEC_ENCODER, _pack_stack(encoder)))
    if opt is not None:
        sections.append((_SEC_OPT, _pack_opt(*opt)))
    if meta:
        parts = [struct.pack("<I", len(meta))]
        for k, v in sorted(meta.items()):
            parts.append(_pack_str(str(k)))
            parts.append(_pack_str(str(v)))
        sections.append((_SEC_META, b"".join(parts)))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(sections)))
        for tag, payload in sections:
            fh.write(struct.pack("<BI", tag, len(payload)))
            fh.write(payload)


def load_checkpoint(path):
    """Read a checkpoint; returns a dict with decoder/encoder/opt/meta."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (nsec,) = struct.unpack_from("<I", buf, 8)
    off = 12
    out = {"decoder": None, "encoder": None, "opt": None, "meta": {}}
    for _ in range(nsec):
        tag, length = struct.unpack_from("<BI", buf, off)
        off += 5
        end = off + length
        if end > len(buf):
            raise ValueError(f"{path}: truncated section at byte {off}")
        if tag == _SEC_DECODER:
            out["decoder"], _ = _unpack_stack(buf, off, DecoderParams)
        elif tag == _SEC_ENCODER:
            out["encoder"], _ = _unpack_stack(buf, off, EncoderParams)
        elif tag == _SEC_OPT:
            out["opt"], _ = _unpack_opt(buf, off)
        elif tag == _SEC_META:
            (cnt,) = struct.unpack_from("<I", buf, off)
            p = off + 4
            for _ in range(cnt):
                k, p = _unpack_str(buf, p)
                v, p = _unpack_str(buf, p)
                out["meta"][k] = v
        off = end
    if out["decoder"] is None:
        raise ValueError(f"{path}: checkpoint has no decoder section")
    return out
