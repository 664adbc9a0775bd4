# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the row-reduction kernels in ``_kernels_py``.

GELU is absent on purpose and cross-entropy takes its exponentials from numpy:
numpy's vectorised tanh and exp outrun a scalar libm loop.

Reductions run left to right in double precision regardless of input dtype.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt

cnp.import_array()

ctypedef fused real:
    float
    double

def layer_norm_fwd(real[:, ::1] x, real[::1] gain, real[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((n, d), dtype=dtype)
    xhat_arr = np.empty((n, d), dtype=dtype)
    rstd_arr = np.empty(n, dtype=dtype)
    cdef real[:, ::1] y = y_arr
    cdef real[:, ::1] xhat = xhat_arr
    cdef real[::1] rstd = rstd_arr
    cdef double mean, var, r, c
    with nogil:
        for i in range(n):
            mean = 0.0
            for j in range(d):
                mean += x[i, j]
            mean /= d
            var = 0.0
            for j in range(d):
                c = x[i, j] - mean
                var += c * c
            var /= d
            r = 1.0 / sqrt(var + eps)
            rstd[i] = <real>r
            for j in range(d):
                c = (x[i, j] - mean) * r
                xhat[i, j] = <real>c
                y[i, j] = <real>(c * gain[j] + bias[j])
    return y_arr, xhat_arr, rstd_arr


def layer_norm_bwd(real[:, ::1] dy, real[:, ::1] xhat, real[::1] rstd, real[::1] gain):
    cdef Py_ssize_t n = dy.shape[0], d = dy.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    dx_arr = np.empty((n, d), dtype=dtype)
    dgain_acc = np.zeros(d, dtype=np.float64)
    dbias_acc = np.zeros(d, dtype=np.float64)
    cdef real[:, ::1] dx = dx_arr
    cdef double[::1] dg = dgain_acc
    cdef double[::1] db = dbias_acc
    cdef double s1, s2, t
    with nogil:
        for i in range(n):
            s1 = 0.0
            s2 = 0.0
            for j in range(d):
                t = dy[i, j] * gain[j]
                s1 += t
                s2 += t * xhat[i, j]
                dg[j] += dy[i, j] * xhat[i, j]
                db[j] += dy[i, j]
            s1 /= d
            s2 /= d
            for j in range(d):
                t = dy[i, j] * gain[j]
                dx[i, j] = <real>((t - s1 - xhat[i, j] * s2) * rstd[i])
    return dx_arr, dgain_acc.astype(dtype), dbias_acc.astype(dtype)


def _causal_softmax_fwd(real[:, :, ::1] s):
    cdef Py_ssize_t b = s.shape[0], q = s.shape[1], k = s.shape[2], n, i, j
    dtype = np.float32 if real is float else np.float64
    p_arr = np.zeros((b, q, k), dtype=dtype)
    cdef real[:, :, ::1] p = p_arr
    cdef double mx, tot, e
    with nogil:
        for n in range(b):
            for i in range(q):
                mx = s[n, i, 0]
                for j in range(1, i + 1):
                    if s[n, i, j] > mx:
                        mx = s[n, i, j]
                tot = 0.0
                for j in range(i + 1):
                    e = exp(s[n, i, j] - mx)
                    p[n, i, j] = <real>e
                    tot += e
                for j in range(i + 1):
                    p[n, i, j] = <real>(p[n, i, j] / tot)
    return p_arr


def _causal_softmax_bwd(real[:, :, ::1] p, real[:, :, ::1] dp):
    cdef Py_ssize_t b = p.shape[0], q = p.shape[1], k = p.shape[2], n, i, j
    dtype = np.float32 if real is float else np.float64
    ds_arr = np.zeros((b, q, k), dtype=dtype)
    cdef real[:, :, ::1] ds = ds_arr
    cdef double dot
    with nogil:
        for n in range(b):
            for i in range(q):
                dot = 0.0
                for j in range(i + 1):
                    dot += dp[n, i, j] * p[n, i, j]
                for j in range(i + 1):
                    ds[n, i, j] = <real>(p[n, i, j] * (dp[n, i, j] - dot))
    return ds_arr


# wraparound is off module-wide, so no negative indexing of Python tuples below
def causal_softmax_fwd(scores):
    s = scores.shape
    q, k = s[len(s) - 2], s[len(s) - 1]
    return _causal_softmax_fwd(scores.reshape(-1, q, k)).reshape(s)


def causal_softmax_bwd(p, dp):
    s = p.shape
    q, k = s[len(s) - 2], s[len(s) - 1]
    return _causal_softmax_bwd(p.reshape(-1, q, k), dp.reshape(-1, q, k)).reshape(s)


def _xent_reduce(real[:, ::1] z, real[:, ::1] e, cnp.int64_t[::1] targets):
    # z = logits - row max, e = exp(z); normalises e in place and returns the summed NLL
    cdef Py_ssize_t n = z.shape[0], v = z.shape[1], i, j
    cdef double tot, inv, total = 0.0
    with nogil:
        for i in range(n):
            tot = 0.0
            for j in range(v):
                tot += e[i, j]
            inv = 1.0 / tot
            for j in range(v):
                e[i, j] = <real>(e[i, j] * inv)
            total += log(tot) - z[i, targets[i]]
    return total


def xent_fwd(logits, targets):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)  # numpy's vectorised exp; the reductions below stay in double
    total = _xent_reduce(z, e, np.ascontiguousarray(targets, dtype=np.int64))
    return total, e


def xent_bwd(probs, targets, scale):
    g = probs.copy()
    g[np.arange(g.shape[0]), targets] -= 1.0
    g *= scale
    return g


def _adamw_update(real[::1] p, real[::1] g, real[::1] m, real[::1] v, double lr, double beta1,
                  double beta2, double eps, double weight_decay, double bc1, double bc2):
    cdef Py_ssize_t n = p.shape[0], i
    cdef double mi, vi, decay = 1.0 - lr * weight_decay
    with nogil:
        for i in range(n):
            if weight_decay != 0.0:
                p[i] = <real>(p[i] * decay)
            mi = beta1 * m[i] + (1.0 - beta1) * g[i]
            vi = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
            m[i] = <real>mi
            v[i] = <real>vi
            p[i] = <real>(p[i] - lr * (mi / bc1) / (sqrt(vi / bc2) + eps))


def adamw_update(p, g, m, v, lr, beta1, beta2, eps, weight_decay, bc1, bc2):
    _adamw_update(p.reshape(-1), np.ascontiguousarray(g).reshape(-1), m.reshape(-1), v.reshape(-1),
                  lr, beta1, beta2, eps, weight_decay, bc1, bc2)
