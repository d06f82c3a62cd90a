"""Differentiable building blocks, each as a forward/backward pair.

Hidden states are ``[B, T, N, C]`` float64 arrays.  Relation matrices are
row-normalized ``[N_dst, N_src]`` and are applied at every (batch, time)
slice through broadcast matmul.  Every ``*_forward`` returns ``(out, cache)``
and the matching ``*_backward(dout, cache)`` returns input and parameter
gradients.  Subgradients at ReLU and |.| kinks are 0.
"""

from __future__ import annotations

import numpy as np


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _flat(x):
    return x.reshape(-1, x.shape[-1])


# ---------------------------------------------------------------- temporal


def gated_conv_forward(x, W, b):
    """Causal width-K convolution along time with GLU gating, P * sigmoid(Q).

    W has shape [K, C_in, 2*C_out]; output time length is T - K + 1 and output
    index i sees inputs i .. i+K-1 only.
    """
    K, C, C2 = W.shape
    T = x.shape[1]
    if T < K:
        raise ValueError(f"temporal length {T} shorter than kernel width {K}")
    T_out = T - K + 1
    cols = np.concatenate([x[:, k : k + T_out] for k in range(K)], axis=-1) if K > 1 else x
    pre = cols @ W.reshape(K * C, C2) + b
    half = C2 // 2
    p, g = pre[..., :half], sigmoid(pre[..., half:])
    return p * g, (cols, p, g, W, T)


def gated_conv_backward(dout, cache):
    cols, p, g, W, T = cache
    K, C, C2 = W.shape
    dpre = np.concatenate([dout * g, dout * p * g * (1.0 - g)], axis=-1)
    dW = (_flat(cols).T @ _flat(dpre)).reshape(W.shape)
    db = _flat(dpre).sum(axis=0)
    dcols = dpre @ W.reshape(K * C, C2).T
    T_out = T - K + 1
    dx = np.zeros(dcols.shape[:1] + (T,) + dcols.shape[2:3] + (C,))
    for k in range(K):
        dx[:, k : k + T_out] += dcols[..., k * C : (k + 1) * C]
    return dx, dW, db


def temporal_gated_conv(x, W, b):
    return gated_conv_forward(x, W, b)[0]


# ---------------------------------------------------------------- graph


def intra_conv_forward(h, A, W, l):
    """ReLU(A H W + l) at every time step."""
    ah = A @ h
    pre = ah @ W + l
    return np.maximum(pre, 0.0), (ah, pre, A, W)


def intra_conv_backward(dout, cache):
    ah, pre, A, W = cache
    dpre = dout * (pre > 0)
    dW = _flat(ah).T @ _flat(dpre)
    dl = _flat(dpre).sum(axis=0)
    dh = A.T @ (dpre @ W.T)
    return dh, dW, dl


def similarity_conv_forward(h_aux, A_tgt, A_cross, W, l):
    """ReLU(A_tgt (A_cross H_aux) W + l): auxiliary features aggregated onto target nodes."""
    s = A_tgt @ (A_cross @ h_aux)
    pre = s @ W + l
    return np.maximum(pre, 0.0), (s, pre, A_tgt, A_cross, W)


def similarity_conv_backward(dout, cache):
    s, pre, A_tgt, A_cross, W = cache
    dpre = dout * (pre > 0)
    dW = _flat(s).T @ _flat(dpre)
    dl = _flat(dpre).sum(axis=0)
    dh_aux = A_cross.T @ (A_tgt.T @ (dpre @ W.T))
    return dh_aux, dW, dl


def difference_conv_forward(h_aux, h_tgt, A_tgt, A_cross, W, l):
    """ReLU(A_tgt |A_cross H_aux - H_tgt| W + l)."""
    gap = A_cross @ h_aux - h_tgt
    s = A_tgt @ np.abs(gap)
    pre = s @ W + l
    return np.maximum(pre, 0.0), (gap, s, pre, A_tgt, A_cross, W)


def difference_conv_backward(dout, cache):
    gap, s, pre, A_tgt, A_cross, W = cache
    dpre = dout * (pre > 0)
    dW = _flat(s).T @ _flat(dpre)
    dl = _flat(dpre).sum(axis=0)
    dgap = (A_tgt.T @ (dpre @ W.T)) * np.sign(gap)
    return A_cross.T @ dgap, -dgap, dW, dl


def intra_modal_conv(h, A, W, l):
    return intra_conv_forward(h, A, W, l)[0]


def inter_modal_similarity_conv(h_aux, h_tgt, A_tgt, A_cross, W, l):
    """``h_tgt`` is accepted for signature symmetry with the difference conv and unused."""
    return similarity_conv_forward(h_aux, A_tgt, A_cross, W, l)[0]


def inter_modal_difference_conv(h_aux, h_tgt, A_tgt, A_cross, W, l):
    if (A_cross @ h_aux).shape != h_tgt.shape:
        raise ValueError("aggregated auxiliary features and target features differ in shape")
    return difference_conv_forward(h_aux, h_tgt, A_tgt, A_cross, W, l)[0]


# ---------------------------------------------------------------- misc


def layer_norm_forward(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layer_norm_backward(dout, cache):
    xhat, inv, gamma = cache
    C = xhat.shape[-1]
    dgamma = _flat(dout * xhat).sum(axis=0)
    dbeta = _flat(dout).sum(axis=0)
    dxhat = dout * gamma
    dx = inv / C * (
        C * dxhat - dxhat.sum(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def dense_forward(x, W, b, relu=False):
    pre = x @ W + b
    out = np.maximum(pre, 0.0) if relu else pre
    return out, (x, pre, W, relu)


def dense_backward(dout, cache):
    x, pre, W, relu = cache
    if relu:
        dout = dout * (pre > 0)
    return dout @ W.T, _flat(x).T @ _flat(dout), _flat(dout).sum(axis=0)
