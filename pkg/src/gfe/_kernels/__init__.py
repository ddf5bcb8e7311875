"""Decoder evaluation kernels with a compiled fast path.

The compiled extension is optional; when it failed to build (or was
skipped) the numpy reference implementation takes over with the same
semantics.  `BACKEND` says which one won the import race.
"""

from . import reference
from .reference import BCE_FLOOR, LOSS_BCE, LOSS_L2

try:
    from . import _speedups

    DecoderCore = _speedups.CDecoder
    BACKEND = _speedups.BACKEND
except ImportError:
    _speedups = None
    DecoderCore = reference.DecoderCore
    BACKEND = reference.BACKEND

ReferenceDecoderCore = reference.DecoderCore


def make_core(weights, biases, backend=None):
    """Bind a parameter set to a decoder core.

    backend: None for the default pick, "reference" or "compiled" to
    force one side (mostly for tests and the benchmark script).
    """
    if backend is None:
        return DecoderCore(weights, biases)
    if backend == "reference":
        return reference.DecoderCore(weights, biases)
    if backend == "compiled":
        if _speedups is None:
            raise RuntimeError("compiled kernels are not available")
        return _speedups.CDecoder(weights, biases)
    raise ValueError("unknown backend %r" % (backend,))


__all__ = [
    "BACKEND",
    "BCE_FLOOR",
    "LOSS_BCE",
    "LOSS_L2",
    "DecoderCore",
    "ReferenceDecoderCore",
    "make_core",
]
