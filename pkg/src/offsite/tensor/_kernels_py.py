"""Pure numpy implementations of the fused kernels.

Every function here has a twin in ``_ckernels.pyx`` with the same signature.
Inputs are contiguous float32 or float64 arrays; outputs share the input dtype.
"""
import numpy as np

_GELU_C = 0.7978845608028654  # sqrt(2 / pi)
_GELU_A = 0.044715


def layer_norm_fwd(x, gain, bias, eps):
    """Row-wise normalisation of a 2-D array. Returns (y, xhat, rstd)."""
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat * gain + bias
    return y.astype(x.dtype, copy=False), xhat.astype(x.dtype, copy=False), rstd[:, 0].astype(x.dtype, copy=False)


def layer_norm_bwd(dy, xhat, rstd, gain):
    d = xhat.shape[1]
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dxhat = dy * gain
    s1 = dxhat.sum(axis=1, keepdims=True)
    s2 = (dxhat * xhat).sum(axis=1, keepdims=True)
    dx = (dxhat - s1 / d - xhat * (s2 / d)) * rstd[:, None]
    return dx.astype(dy.dtype, copy=False), dgain, dbias


def gelu_fwd(x):
    t = x * x
    t *= _GELU_A
    t += 1.0
    t *= x
    t *= _GELU_C
    np.tanh(t, out=t)
    t += 1.0
    t *= x
    t *= 0.5
    return t


def gelu_bwd(x, dy):
    x2 = x * x
    t = x2 * _GELU_A
    t += 1.0
    t *= x
    t *= _GELU_C
    np.tanh(t, out=t)
    # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3a x^2)
    x2 *= 3.0 * _GELU_A
    x2 += 1.0
    x2 *= _GELU_C
    x2 *= x
    x2 *= 0.5
    s = t * t
    np.subtract(1.0, s, out=s)
    s *= x2
    t += 1.0
    t *= 0.5
    t += s
    t *= dy
    return t


def causal_softmax_fwd(scores):
    """Softmax over the last axis of ``scores[n, s, s]`` with key j > query i masked."""
    s = scores.shape[-1]
    mask = np.triu(np.ones((s, s), dtype=bool), k=1)
    z = np.where(mask, -np.inf, scores)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    return p.astype(scores.dtype, copy=False)


def causal_softmax_bwd(p, dp):
    dot = (dp * p).sum(axis=-1, keepdims=True)
    return (p * (dp - dot)).astype(dp.dtype, copy=False)


def xent_fwd(logits, targets):
    """Returns (sum of per-row NLL as float, softmax probabilities)."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    probs = e / s
    rows = np.arange(logits.shape[0])
    nll = np.log(s[:, 0]) - z[rows, targets]
    return float(nll.astype(np.float64).sum()), probs.astype(logits.dtype, copy=False)


def xent_bwd(probs, targets, scale):
    g = probs.copy()
    g[np.arange(g.shape[0]), targets] -= 1.0
    g *= scale
    return g


def adamw_update(p, g, m, v, lr, beta1, beta2, eps, weight_decay, bc1, bc2):
    """In-place AdamW update of ``p``, ``m`` and ``v`` (all same shape)."""
    dt = p.dtype.type
    if weight_decay != 0.0:
        p *= dt(1.0 - lr * weight_decay)
    m *= dt(beta1)
    m += dt(1.0 - beta1) * g
    v *= dt(beta2)
    v += dt(1.0 - beta2) * (g * g)
    mhat = m / dt(bc1)
    vhat = v / dt(bc2)
    p -= dt(lr) * mhat / (np.sqrt(vhat) + dt(eps))
