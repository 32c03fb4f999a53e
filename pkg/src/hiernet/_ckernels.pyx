# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled forward/backward kernels.

Same API as ``_pykernels``.  Loops run point by point so small layers avoid
the per-call overhead of BLAS; summation order is fixed, results are
deterministic.
"""

import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, free

cnp.import_array()

NAME = "cython"

ctypedef cnp.int64_t i64


cdef inline double _act(double z, double delta) noexcept nogil:
    return z if z >= 0.0 else delta * z


cdef inline double _dact(double z, double delta) noexcept nogil:
    return 1.0 if z >= 0.0 else delta


cdef void _forward_point(const double* p, const i64* w, int nl, const double* x,
                         double* pre, double delta) noexcept nogil:
    # pre receives the pre-activations of every layer, concatenated
    cdef int i, j, k, r, c
    cdef Py_ssize_t po = 0, zo = 0, zin = 0
    cdef double s
    for i in range(nl):
        r = <int>w[i + 1]
        c = <int>w[i]
        for j in range(r):
            s = 0.0
            if i == 0:
                for k in range(c):
                    s += p[po + j * c + k] * x[k]
            else:
                for k in range(c):
                    s += p[po + j * c + k] * _act(pre[zin + k], delta)
            pre[zo + j] = s + p[po + r * c + j]
        if i > 0:
            zin += c
        zo += r
        po += r * c + r


cdef void _backward_point(const double* p, const i64* w, int nl, const double* x,
                          const double* pre, double seed, double delta, double* grad,
                          double* g, double* gprev, const Py_ssize_t* poff,
                          const Py_ssize_t* zoff) noexcept nogil:
    cdef int i, j, k, r, c
    cdef double a, gj
    cdef double* tmp
    g[0] = seed
    for i in range(nl - 1, -1, -1):
        r = <int>w[i + 1]
        c = <int>w[i]
        for j in range(r):
            gj = g[j]
            if gj == 0.0:
                continue
            if i == 0:
                for k in range(c):
                    grad[poff[i] + j * c + k] += gj * x[k]
            else:
                for k in range(c):
                    grad[poff[i] + j * c + k] += gj * _act(pre[zoff[i - 1] + k], delta)
            grad[poff[i] + r * c + j] += gj
        if i > 0:
            for k in range(c):
                a = 0.0
                for j in range(r):
                    a += p[poff[i] + j * c + k] * g[j]
                gprev[k] = a * _dact(pre[zoff[i - 1] + k], delta)
            tmp = g
            g = gprev
            gprev = tmp


# one hidden layer: p = [W0 (h x c), B0 (h), W1 (h), B1] ------------------------


cdef inline double _forward1(const double* p, int c, int h, const double* x,
                             double delta) noexcept nogil:
    cdef int j, k
    cdef const double* b0 = p + h * c
    cdef const double* w1 = b0 + h
    cdef double z, s = w1[h]
    for j in range(h):
        z = b0[j]
        for k in range(c):
            z += p[j * c + k] * x[k]
        s += w1[j] * _act(z, delta)
    return s


cdef inline void _backward1(const double* p, int c, int h, const double* x, double seed,
                            double delta, double* grad) noexcept nogil:
    cdef int j, k
    cdef const double* b0 = p + h * c
    cdef const double* w1 = b0 + h
    cdef double z, gj
    for j in range(h):
        z = b0[j]
        for k in range(c):
            z += p[j * c + k] * x[k]
        grad[h * c + h + j] += seed * _act(z, delta)
        gj = seed * w1[j] * _dact(z, delta)
        if gj != 0.0:
            for k in range(c):
                grad[j * c + k] += gj * x[k]
            grad[h * c + j] += gj
    grad[h * c + 2 * h] += seed


cdef class _Layout:
    cdef Py_ssize_t* poff
    cdef Py_ssize_t* zoff
    cdef int nl
    cdef Py_ssize_t zsize
    cdef int wmax

    def __cinit__(self, const i64[::1] w):
        cdef int i
        cdef Py_ssize_t po = 0, zo = 0
        self.nl = <int>w.shape[0] - 1
        self.poff = <Py_ssize_t*>malloc(self.nl * sizeof(Py_ssize_t))
        self.zoff = <Py_ssize_t*>malloc(self.nl * sizeof(Py_ssize_t))
        self.wmax = 1
        for i in range(self.nl):
            self.poff[i] = po
            self.zoff[i] = zo
            po += w[i + 1] * w[i] + w[i + 1]
            zo += w[i + 1]
            if w[i + 1] > self.wmax:
                self.wmax = <int>w[i + 1]
        self.zsize = zo

    def __dealloc__(self):
        free(self.poff)
        free(self.zoff)


def forward(P, widths, X, double delta):
    cdef const double[:, ::1] Pv = np.ascontiguousarray(P, dtype=np.float64)
    cdef const i64[::1] w = np.ascontiguousarray(widths, dtype=np.int64)
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef _Layout lay = _Layout(w)
    cdef Py_ssize_t R = Pv.shape[0], m = Xv.shape[0], rr, t
    out = np.empty((R, m), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef int c = <int>w[0], h = <int>w[1]
    cdef double* pre
    if lay.nl == 2:
        with nogil:
            for rr in range(R):
                for t in range(m):
                    ov[rr, t] = _forward1(&Pv[rr, 0], c, h, &Xv[t, 0], delta)
        return out
    pre = <double*>malloc(lay.zsize * sizeof(double))
    with nogil:
        for rr in range(R):
            for t in range(m):
                _forward_point(&Pv[rr, 0], &w[0], lay.nl, &Xv[t, 0], pre, delta)
                ov[rr, t] = pre[lay.zsize - 1]
    free(pre)
    return out


def vjp(P, widths, X, double delta, seeds):
    cdef const double[:, ::1] Pv = np.ascontiguousarray(P, dtype=np.float64)
    cdef const i64[::1] w = np.ascontiguousarray(widths, dtype=np.int64)
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[:, ::1] Sv = np.ascontiguousarray(seeds, dtype=np.float64)
    cdef _Layout lay = _Layout(w)
    cdef Py_ssize_t R = Pv.shape[0], m = Xv.shape[0], p = Pv.shape[1], rr, t
    out = np.zeros((R, p), dtype=np.float64)
    cdef double[:, ::1] gv = out
    cdef int c = <int>w[0], h = <int>w[1]
    if lay.nl == 2:
        with nogil:
            for rr in range(R):
                for t in range(m):
                    if Sv[rr, t] != 0.0:
                        _backward1(&Pv[rr, 0], c, h, &Xv[t, 0], Sv[rr, t], delta, &gv[rr, 0])
        return out
    cdef double* pre = <double*>malloc(lay.zsize * sizeof(double))
    cdef double* g1 = <double*>malloc(lay.wmax * sizeof(double))
    cdef double* g2 = <double*>malloc(lay.wmax * sizeof(double))
    with nogil:
        for rr in range(R):
            for t in range(m):
                if Sv[rr, t] == 0.0:
                    continue
                _forward_point(&Pv[rr, 0], &w[0], lay.nl, &Xv[t, 0], pre, delta)
                _backward_point(&Pv[rr, 0], &w[0], lay.nl, &Xv[t, 0], pre, Sv[rr, t],
                                delta, &gv[rr, 0], g1, g2, lay.poff, lay.zoff)
    free(pre)
    free(g1)
    free(g2)
    return out


def loss_grad(params, widths, X, coef, y, gamma, int K, double delta):
    cdef const double[::1] pv = np.ascontiguousarray(params, dtype=np.float64)
    cdef const i64[::1] w = np.ascontiguousarray(widths, dtype=np.int64)
    cdef const double[:, ::1] Xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[::1] cv = np.ascontiguousarray(coef, dtype=np.float64)
    cdef const double[::1] yv = np.ascontiguousarray(y, dtype=np.float64)
    cdef const double[::1] gam = np.ascontiguousarray(gamma, dtype=np.float64)
    cdef _Layout lay = _Layout(w)
    cdef Py_ssize_t m = Xv.shape[0], n = yv.shape[0], p = pv.shape[0], t, i, k
    grad = np.zeros(p, dtype=np.float64)
    hf = np.empty(n, dtype=np.float64)
    cdef double[::1] gv = grad
    cdef double[::1] hv = hf
    cdef double* pre = <double*>malloc(m * lay.zsize * sizeof(double))
    cdef double* g1 = <double*>malloc(lay.wmax * sizeof(double))
    cdef double* g2 = <double*>malloc(lay.wmax * sizeof(double))
    cdef double* res = <double*>malloc(n * sizeof(double))
    cdef double s, r, term, tt, total = 0.0, comp = 0.0, seed
    cdef bint one = lay.nl == 2
    cdef int c = <int>w[0], h = <int>w[1]
    with nogil:
        for t in range(m):
            if one:
                pre[t * lay.zsize + lay.zsize - 1] = _forward1(&pv[0], c, h, &Xv[t, 0], delta)
            else:
                _forward_point(&pv[0], &w[0], lay.nl, &Xv[t, 0], pre + t * lay.zsize, delta)
        for i in range(n):
            s = 0.0
            for k in range(K):
                t = i * K + k
                s += cv[t] * pre[t * lay.zsize + lay.zsize - 1]
            hv[i] = s
            r = yv[i] - s
            res[i] = r
            # compensated summation of the weighted squared residuals
            term = gam[i] * r * r - comp
            tt = total + term
            comp = (tt - total) - term
            total = tt
        for i in range(n):
            for k in range(K):
                t = i * K + k
                seed = -2.0 * gam[i] * res[i] * cv[t]
                if seed == 0.0:
                    continue
                if one:
                    _backward1(&pv[0], c, h, &Xv[t, 0], seed, delta, &gv[0])
                else:
                    _backward_point(&pv[0], &w[0], lay.nl, &Xv[t, 0], pre + t * lay.zsize,
                                    seed, delta, &gv[0], g1, g2, lay.poff, lay.zoff)
    free(pre)
    free(g1)
    free(g2)
    free(res)
    return total, grad, hf
