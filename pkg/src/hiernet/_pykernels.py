"""Pure numpy kernels; reference implementation and fallback for ``_ckernels``.

All functions take parameters in the canonical flat layout and the layer
widths as an int64 array.  Batched entry points accept a 2-D parameter array
with one network per row (all sharing the same widths).
"""

import math

import numpy as np

NAME = "python"


def _offsets(widths):
    offs = []
    k = 0
    for i in range(len(widths) - 1):
        r, c = int(widths[i + 1]), int(widths[i])
        offs.append((k, k + r * c, r, c))
        k += r * c + r
    return offs


def _unpack(P, widths):
    R = P.shape[0]
    layers = []
    for s, sb, r, c in _offsets(widths):
        layers.append((P[:, s:sb].reshape(R, r, c), P[:, sb : sb + r]))
    return layers


def _forward_cache(P, widths, X, delta):
    layers = _unpack(P, widths)
    A = np.broadcast_to(X, (P.shape[0],) + X.shape)
    pre = []
    for i, (W, B) in enumerate(layers):
        if i > 0:
            A = np.where(pre[-1] >= 0.0, pre[-1], delta * pre[-1])
        Z = np.matmul(A, W.transpose(0, 2, 1)) + B[:, None, :]
        pre.append(Z)
    return layers, pre


def forward(P, widths, X, delta):
    _, pre = _forward_cache(P, widths, X, delta)
    return pre[-1][:, :, 0].copy()


def _backward(layers, pre, X, delta, seeds, widths):
    R = seeds.shape[0]
    grads = [None] * len(layers)
    G = seeds[:, :, None]
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        if i > 0:
            Zp = pre[i - 1]
            A = np.where(Zp >= 0.0, Zp, delta * Zp)
        else:
            A = np.broadcast_to(X, (R,) + X.shape)
        gW = np.matmul(G.transpose(0, 2, 1), A)
        gB = G.sum(axis=1)
        grads[i] = (gW.reshape(R, -1), gB)
        if i > 0:
            G = np.matmul(G, W) * np.where(pre[i - 1] >= 0.0, 1.0, delta)
    out = []
    for gW, gB in grads:
        out.append(gW)
        out.append(gB)
    return np.concatenate(out, axis=1)


def vjp(P, widths, X, delta, seeds):
    layers, pre = _forward_cache(P, widths, X, delta)
    return _backward(layers, pre, X, delta, seeds, widths)


def loss_grad(params, widths, X, coef, y, gamma, K, delta):
    P = params[None, :]
    layers, pre = _forward_cache(P, widths, X, delta)
    F = pre[-1][0, :, 0]
    hf = (coef * F).reshape(-1, K).sum(axis=1)
    r = y - hf
    loss = math.fsum(gamma * r * r)
    seeds = (-2.0 * np.repeat(gamma * r, K) * coef)[None, :]
    grad = _backward(layers, pre, X, delta, seeds, widths)[0]
    return loss, grad, hf
