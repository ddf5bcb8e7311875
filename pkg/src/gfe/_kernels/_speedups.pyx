# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled decoder kernels.

Same contract as gfe._kernels.reference: fused forward / loss / gradient
evaluation of the affine+ELU stack with sigmoid output, float64 only.
Matrix work goes through BLAS dgemv/dger.  Methods allocate their scratch
per call, so one core can be shared read-only across threads.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp as c_exp, log as c_log
from scipy.linalg.cython_blas cimport dgemv, dger

cnp.import_array()

BACKEND = "compiled"

cdef enum:
    _KIND_BCE = 0
    _KIND_L2 = 1

LOSS_BCE = _KIND_BCE
LOSS_L2 = _KIND_L2

cdef double BCE_FLOOR = 1e-12


cdef inline double _elu(double s) noexcept nogil:
    return s if s >= 0.0 else c_exp(s) - 1.0


cdef inline double _elu_grad(double s) noexcept nogil:
    return 1.0 if s >= 0.0 else c_exp(s)


cdef inline double _sigmoid(double s) noexcept nogil:
    cdef double e
    if s >= 0.0:
        return 1.0 / (1.0 + c_exp(-s))
    e = c_exp(s)
    return e / (1.0 + e)


cdef void _matvec(double[:, ::1] w, double* x, double* out) noexcept nogil:
    # out = W @ x for row-major W (m, n): BLAS sees the buffer as the
    # column-major (n, m) matrix W^T, so ask for its transpose.
    cdef int m = w.shape[0], n = w.shape[1], inc = 1
    cdef double one = 1.0, zero = 0.0
    dgemv("T", &n, &m, &one, &w[0, 0], &n, x, &inc, &zero, out, &inc)


cdef void _matvec_t(double[:, ::1] w, double* x, double* out) noexcept nogil:
    # out = W.T @ x
    cdef int m = w.shape[0], n = w.shape[1], inc = 1
    cdef double one = 1.0, zero = 0.0
    dgemv("N", &n, &m, &one, &w[0, 0], &n, x, &inc, &zero, out, &inc)


cdef void _outer(double* d, double* a, double[:, ::1] gw) noexcept nogil:
    # gw = outer(d, a) for row-major gw (m, n); the column-major view of
    # the same buffer is outer(a, d).
    cdef int m = gw.shape[0], n = gw.shape[1], inc = 1
    cdef double one = 1.0
    gw[:, :] = 0.0
    dger(&n, &m, &one, a, &inc, d, &inc, &gw[0, 0], &n)


cdef class CDecoder:
    """Decoder bound to one parameter set; read-only and shareable."""

    cdef list _ws
    cdef list _bs
    cdef readonly tuple widths
    cdef int nlayers
    cdef int maxw
    cdef int latdim
    cdef int outdim

    def __init__(self, weights, biases):
        if len(weights) != len(biases) or not weights:
            raise ValueError("need one bias per weight matrix")
        self._ws = [np.ascontiguousarray(w, dtype=np.float64) for w in weights]
        self._bs = [np.ascontiguousarray(b, dtype=np.float64) for b in biases]
        self.nlayers = len(self._ws)
        ws = [self._ws[0].shape[1]] + [w.shape[0] for w in self._ws]
        self.widths = tuple(ws)
        self.maxw = max(ws)
        self.latdim = ws[0]
        self.outdim = ws[self.nlayers]

    @property
    def latent_dim(self):
        return self.latdim

    @property
    def output_dim(self):
        return self.outdim

    cdef void _run_forward(self, double[::1] z, double[:, ::1] acts,
                           double[:, ::1] pres):
        cdef int li, j, n
        cdef double[:, ::1] w
        cdef double[::1] b
        cdef int last = self.nlayers - 1
        n = z.shape[0]
        for j in range(n):
            acts[0, j] = z[j]
        for li in range(self.nlayers):
            w = self._ws[li]
            b = self._bs[li]
            n = w.shape[0]
            with nogil:
                _matvec(w, &acts[li, 0], &pres[li, 0])
                for j in range(n):
                    pres[li, j] += b[j]
                if li == last:
                    for j in range(n):
                        acts[li + 1, j] = _sigmoid(pres[li, j])
                else:
                    for j in range(n):
                        acts[li + 1, j] = _elu(pres[li, j])

    cdef double _loss_from(self, double[:, ::1] acts, double[::1] y, int kind) noexcept nogil:
        cdef int npix = y.shape[0]
        cdef int L = self.nlayers
        cdef int j
        cdef double acc = 0.0, c, d
        if kind == _KIND_BCE:
            for j in range(npix):
                c = acts[L, j]
                if c < BCE_FLOOR:
                    c = BCE_FLOOR
                elif c > 1.0 - BCE_FLOOR:
                    c = 1.0 - BCE_FLOOR
                acc += y[j] * c_log(c) + (1.0 - y[j]) * c_log(1.0 - c)
            return -acc / npix
        for j in range(npix):
            d = acts[L, j] - y[j]
            acc += d * d
        return acc

    cdef void _output_delta(self, double[:, ::1] acts, double[::1] y, int kind,
                            double* delta) noexcept nogil:
        cdef int npix = y.shape[0]
        cdef int L = self.nlayers
        cdef int j
        cdef double yh
        if kind == _KIND_BCE:
            for j in range(npix):
                yh = acts[L, j]
                if yh >= BCE_FLOOR and yh <= 1.0 - BCE_FLOOR:
                    delta[j] = (yh - y[j]) / npix
                else:
                    delta[j] = 0.0
        else:
            for j in range(npix):
                yh = acts[L, j]
                delta[j] = 2.0 * (yh - y[j]) * yh * (1.0 - yh)

    def decode(self, z):
        cdef double[::1] zv = np.ascontiguousarray(z, dtype=np.float64)
        acts_np = np.empty((self.nlayers + 1, self.maxw))
        pres_np = np.empty((self.nlayers, self.maxw))
        cdef double[:, ::1] acts = acts_np
        cdef double[:, ::1] pres = pres_np
        self._run_forward(zv, acts, pres)
        return acts_np[self.nlayers, : self.outdim].copy()

    def loss(self, z, y, int kind):
        cdef double[::1] zv = np.ascontiguousarray(z, dtype=np.float64)
        cdef double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
        acts_np = np.empty((self.nlayers + 1, self.maxw))
        pres_np = np.empty((self.nlayers, self.maxw))
        cdef double[:, ::1] acts = acts_np
        cdef double[:, ::1] pres = pres_np
        self._run_forward(zv, acts, pres)
        return self._loss_from(acts, yv, kind)

    def loss_grad_z(self, z, y, int kind):
        cdef double[::1] zv = np.ascontiguousarray(z, dtype=np.float64)
        cdef double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
        acts_np = np.empty((self.nlayers + 1, self.maxw))
        pres_np = np.empty((self.nlayers, self.maxw))
        cdef double[:, ::1] acts = acts_np
        cdef double[:, ::1] pres = pres_np
        cdef double[::1] buf_a = np.empty(self.maxw)
        cdef double[::1] buf_b = np.empty(self.maxw)
        gz_np = np.empty(self.latdim)
        cdef double[::1] gz = gz_np
        cdef double loss
        cdef int li, j
        cdef double[:, ::1] w

        self._run_forward(zv, acts, pres)
        loss = self._loss_from(acts, yv, kind)
        with nogil:
            self._output_delta(acts, yv, kind, &buf_a[0])
        for li in range(self.nlayers - 1, 0, -1):
            w = self._ws[li]
            with nogil:
                _matvec_t(w, &buf_a[0], &buf_b[0])
                for j in range(w.shape[1]):
                    buf_a[j] = buf_b[j] * _elu_grad(pres[li - 1, j])
        w = self._ws[0]
        with nogil:
            _matvec_t(w, &buf_a[0], &gz[0])
        return loss, gz_np

    def loss_grad_theta(self, z, y, int kind):
        cdef double[::1] zv = np.ascontiguousarray(z, dtype=np.float64)
        cdef double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
        acts_np = np.empty((self.nlayers + 1, self.maxw))
        pres_np = np.empty((self.nlayers, self.maxw))
        cdef double[:, ::1] acts = acts_np
        cdef double[:, ::1] pres = pres_np
        cdef double[::1] buf_a = np.empty(self.maxw)
        cdef double[::1] buf_b = np.empty(self.maxw)
        cdef double loss
        cdef int li, j
        cdef double[:, ::1] w, gw
        cdef double[::1] gb

        self._run_forward(zv, acts, pres)
        loss = self._loss_from(acts, yv, kind)

        grads = []
        for li in range(self.nlayers):
            w = self._ws[li]
            grads.append(np.empty((w.shape[0], w.shape[1])))
            grads.append(np.empty(w.shape[0]))

        with nogil:
            self._output_delta(acts, yv, kind, &buf_a[0])
        for li in range(self.nlayers - 1, -1, -1):
            w = self._ws[li]
            gw = grads[2 * li]
            gb = grads[2 * li + 1]
            with nogil:
                _outer(&buf_a[0], &acts[li, 0], gw)
                for j in range(w.shape[0]):
                    gb[j] = buf_a[j]
                if li > 0:
                    _matvec_t(w, &buf_a[0], &buf_b[0])
                    for j in range(w.shape[1]):
                        buf_a[j] = buf_b[j] * _elu_grad(pres[li - 1, j])
        return loss, grads
