"""Straight-line loop reimplementations used as independent test oracles.

Nothing here imports the package's kernels; every value is computed with
scalar Python loops over plain float arithmetic.
"""

import math

import numpy as np


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def lstm_loop(X, W, U, b, gates=("f", "i", "o", "c")):
    """X (T, D); W[g] (d, D); U[g] (d, d); b[g] (d,). Returns H (T, d)."""
    T, D = X.shape
    d = len(b["f"])
    h = [0.0] * d
    c = [0.0] * d
    out = []
    for t in range(T):
        pre = {}
        for g in gates:
            pre[g] = [
                b[g][j] + sum(W[g][j][k] * X[t][k] for k in range(D)) + sum(U[g][j][k] * h[k] for k in range(d))
                for j in range(d)
            ]
        f = [sig(z) for z in pre["f"]]
        i = [sig(z) for z in pre["i"]]
        o = [sig(z) for z in pre["o"]]
        g_ = [math.tanh(z) for z in pre["c"]]
        c = [f[j] * c[j] + i[j] * g_[j] for j in range(d)]
        h = [o[j] * math.tanh(c[j]) for j in range(d)]
        out.append(list(h))
    return np.array(out)


def attention_loop(Hseq, logits):
    T, d = Hseq.shape
    m = max(logits)
    e = [math.exp(a - m) for a in logits]
    s = sum(e)
    return np.array([sum(e[t] / s * Hseq[t][j] for t in range(T)) for j in range(d)])


def conv_loop(F, W, b):
    """F (T, Din); W (Dout, Din, k); valid, stride 1. Returns (T - k + 1, Dout)."""
    T, Din = F.shape
    Dout, _, k = W.shape
    out = np.zeros((T - k + 1, Dout))
    for t in range(T - k + 1):
        for o in range(Dout):
            acc = b[o]
            for j in range(k):
                for i in range(Din):
                    acc += W[o][i][j] * F[t + j][i]
            out[t][o] = acc
    return out


def conv_relu_loop(F, W, b):
    y = conv_loop(F, W, b)
    return np.array([[max(v, 0.0) for v in row] for row in y])


def batchnorm_loop(A, gamma, beta, eps=1e-5):
    """A (B, T, C); statistics over batch and time per channel."""
    B, T, C = A.shape
    out = np.zeros_like(A)
    for ch in range(C):
        vals = [A[n][t][ch] for n in range(B) for t in range(T)]
        mu = sum(vals) / len(vals)
        var = sum((v - mu) ** 2 for v in vals) / len(vals)
        for n in range(B):
            for t in range(T):
                out[n][t][ch] = gamma[ch] * (A[n][t][ch] - mu) / math.sqrt(var + eps) + beta[ch]
    return out


def gap_loop(F):
    T, D = F.shape
    return np.array([sum(F[t][j] for t in range(T)) / T for j in range(D)])


def outer_loop(a, b):
    return np.array([[a[p] * b[q] for q in range(len(b))] for p in range(len(a))])


def correlation_loop(preds):
    """(K, K, C) with intra channels first, then u < w pairs."""
    V = len(preds)
    pairs = [(v, v) for v in range(V)] + [(u, w) for u in range(V) for w in range(u + 1, V)]
    K = len(preds[0])
    out = np.zeros((K, K, len(pairs)))
    for c, (u, w) in enumerate(pairs):
        for p in range(K):
            for q in range(K):
                out[p][q][c] = preds[u][p] * preds[w][q]
    return out


def channel_fuse_loop(ct, W, b):
    S1, S2, C = ct.shape
    Nk = len(b)
    out = np.zeros((S1, S2, Nk))
    for p in range(S1):
        for q in range(S2):
            for o in range(Nk):
                acc = b[o]
                for c in range(C):
                    acc += W[o][c] * ct[p][q][c]
                out[p][q][o] = max(acc, 0.0)
    return out


def softmax_loop(z):
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return np.array([v / s for v in e])


def linear_softmax_loop(flat, W, b):
    K, D = W.shape
    return softmax_loop([b[k] + sum(W[k][i] * flat[i] for i in range(D)) for k in range(K)])


def count_accuracy(preds, labels):
    hits = 0
    for p, y in zip(preds, labels):
        if p == y:
            hits += 1
    return hits / len(labels)


def random_simplex(rng, k):
    x = rng.exponential(size=k)
    return x / x.sum()
