"""Explicit-loop reference implementations used as test oracles.

Everything here is written per node, per edge and per time step with Python
loops so it shares no vectorized code path with the package.
"""

import math

import numpy as np

from mrgnn.graphs import KINDS


def relu(x):
    return x if x > 0 else 0.0


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def gated_conv_loop(x, W, b):
    B, T, N, C = x.shape
    K, _, C2 = W.shape
    half = C2 // 2
    out = np.zeros((B, T - K + 1, N, half))
    for bb in range(B):
        for t in range(T - K + 1):
            for n in range(N):
                for o in range(half):
                    p, q = b[o], b[half + o]
                    for k in range(K):
                        for c in range(C):
                            p += x[bb, t + k, n, c] * W[k, c, o]
                            q += x[bb, t + k, n, c] * W[k, c, half + o]
                    out[bb, t, n, o] = p * sigmoid(q)
    return out


def _aggregate(A, h):
    """sum_j A[i, j] h[..., j, :] with an explicit edge loop."""
    B, T, _, C = h.shape
    out = np.zeros((B, T, A.shape[0], C))
    for bb in range(B):
        for t in range(T):
            for i in range(A.shape[0]):
                for j in range(A.shape[1]):
                    w = A[i, j]
                    if w == 0:
                        continue
                    for c in range(C):
                        out[bb, t, i, c] += w * h[bb, t, j, c]
    return out


def _linear_relu(s, W, l):
    B, T, N, C = s.shape
    out = np.zeros((B, T, N, W.shape[1]))
    for bb in range(B):
        for t in range(T):
            for n in range(N):
                for o in range(W.shape[1]):
                    acc = l[o]
                    for c in range(C):
                        acc += s[bb, t, n, c] * W[c, o]
                    out[bb, t, n, o] = relu(acc)
    return out


def intra_loop(h, A, W, l):
    return _linear_relu(_aggregate(A, h), W, l)


def similarity_loop(h_aux, A_tgt, A_cross, W, l):
    return _linear_relu(_aggregate(A_tgt, _aggregate(A_cross, h_aux)), W, l)


def difference_loop(h_aux, h_tgt, A_tgt, A_cross, W, l):
    agg = _aggregate(A_cross, h_aux)
    gap = np.zeros_like(agg)
    for idx in np.ndindex(agg.shape):
        gap[idx] = abs(agg[idx] - h_tgt[idx])
    return _linear_relu(_aggregate(A_tgt, gap), W, l)


def layer_norm_loop(x, gamma, beta, eps=1e-5):
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape[:-1]):
        v = list(x[idx])
        mu = sum(v) / len(v)
        var = sum((a - mu) ** 2 for a in v) / len(v)
        for c, a in enumerate(v):
            out[idx + (c,)] = (a - mu) / math.sqrt(var + eps) * gamma[c] + beta[c]
    return out


def dense_loop(x, W, b, act=False):
    out = np.zeros(x.shape[:-1] + (W.shape[1],))
    for idx in np.ndindex(x.shape[:-1]):
        for o in range(W.shape[1]):
            acc = b[o] + sum(x[idx + (c,)] * W[c, o] for c in range(W.shape[0]))
            out[idx + (o,)] = relu(acc) if act else acc
    return out


def forward_loop(model, inputs, adj):
    """Replay the whole network layer by layer with the loop oracles (no dropout)."""
    cfg, P = model.config, model.params
    t = cfg.target
    H = {m: np.asarray(inputs[m], dtype=float) for m in cfg.modes}
    for l in range(cfg.n_blocks):
        p = f"b{l}."
        U = {m: gated_conv_loop(H[m], P[p + f"{m}.tcn1.W"], P[p + f"{m}.tcn1.b"]) for m in cfg.modes}
        M = {m: np.zeros_like(U[m]) for m in cfg.modes}
        for m in cfg.modes:
            for kind in KINDS:
                g = p + f"gc.{m}.intra.{kind}"
                M[m] += intra_loop(U[m], adj[(m, m, kind)], P[g + ".W"], P[g + ".b"])
        for a in cfg.auxiliary:
            for kind in KINDS:
                g = p + f"gc.{t}.{a}.{kind}"
                A_t, A_c = adj[(t, t, kind)], adj[(a, t, kind)]
                M[t] += similarity_loop(U[a], A_t, A_c, P[g + ".sim.W"], P[g + ".sim.b"])
                M[t] += difference_loop(U[a], U[t], A_t, A_c, P[g + ".diff.W"], P[g + ".diff.b"])
        for m in cfg.modes:
            V = gated_conv_loop(U[m] + M[m], P[p + f"{m}.tcn2.W"], P[p + f"{m}.tcn2.b"])
            H[m] = layer_norm_loop(V, P[p + f"{m}.ln.gamma"], P[p + f"{m}.ln.beta"])
    preds = {}
    for m in cfg.modes:
        z = gated_conv_loop(H[m], P[f"head.{m}.tconv.W"], P[f"head.{m}.tconv.b"])[:, 0]
        z = dense_loop(z, P[f"head.{m}.fc1.W"], P[f"head.{m}.fc1.b"], act=True)
        preds[m] = dense_loop(z, P[f"head.{m}.fc2.W"], P[f"head.{m}.fc2.b"])
    return preds


def finite_difference(f, x, h=1e-5):
    """Central differences of scalar f with respect to every entry of array x (mutated and restored)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def kink_margin(tape):
    """Smallest |value| that passes through a ReLU or an absolute value in a recorded forward pass."""
    vals = []
    for c1, cg, masks, c2, cn in tape.blocks:
        for c in cg:
            if len(c) == 4:  # intra: (ah, pre, A, W)
                vals.append(c[1])
            elif len(c) == 5:  # similarity: (s, pre, A_tgt, A_cross, W)
                vals.append(c[1])
            else:  # difference: (gap, s, pre, A_tgt, A_cross, W)
                vals.extend([c[0], c[2]])
    for ct, cf1, cf2 in tape.heads.values():
        vals.append(cf1[1])
    return min(float(np.abs(v).min()) for v in vals)


def gradient_mismatches(analytic, numeric, rtol=1e-4, atol=1e-8):
    """Entries where neither the relative nor the absolute tolerance holds."""
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    return np.argwhere((diff > atol) & (diff > rtol * scale))
