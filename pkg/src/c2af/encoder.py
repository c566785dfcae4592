"""Per-view two-stream temporal encoder and view classifier.

The global stream is an LSTM whose hidden states are pooled by a learned
softmax attention over time steps. The local stream is a stack of valid 1-D
convolutions, each followed by ReLU and then batch norm, reduced by global
average pooling. The two pooled vectors are concatenated and mapped to class
probabilities by a linear layer plus softmax.

All kernels accept batched input ``(B, T, D)``; a single ``(T, D)`` sample is
treated as a batch of one and returned without the batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    Param,
    as_tensor,
    relu,
    sigmoid,
    sigmoid_grad,
    softmax,
    softmax_cross_entropy,
    tanh_grad,
)

GATES = ("f", "i", "o", "c")
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = as_tensor(x)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ValueError(f"expected (T, D) or (B, T, D) input, got shape {x.shape}")
    return x, False


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class LstmParams:
    W_f: Param
    W_i: Param
    W_o: Param
    W_c: Param
    U_f: Param
    U_i: Param
    U_o: Param
    U_c: Param
    b_f: Param
    b_i: Param
    b_o: Param
    b_c: Param

    def __post_init__(self):
        d, D = self.W_f.shape
        for g in GATES:
            if getattr(self, f"W_{g}").shape != (d, D):
                raise ValueError(f"W_{g} must be {(d, D)}")
            if getattr(self, f"U_{g}").shape != (d, d):
                raise ValueError(f"U_{g} must be {(d, d)}")
            if getattr(self, f"b_{g}").shape != (d,):
                raise ValueError(f"b_{g} must be {(d,)}")

    @property
    def hidden_size(self) -> int:
        return self.W_f.shape[0]

    @property
    def input_size(self) -> int:
        return self.W_f.shape[1]

    def params(self) -> list[Param]:
        return [getattr(self, f"{kind}_{g}") for kind in ("W", "U", "b") for g in GATES]

    def stacked(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        W = np.concatenate([getattr(self, f"W_{g}").value for g in GATES], axis=0)
        U = np.concatenate([getattr(self, f"U_{g}").value for g in GATES], axis=0)
        b = np.concatenate([getattr(self, f"b_{g}").value for g in GATES], axis=0)
        return W, U, b


@dataclass
class AttentionParams:
    logits: Param

    @property
    def length(self) -> int:
        return self.logits.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return softmax(self.logits.value)

    def params(self) -> list[Param]:
        return [self.logits]


@dataclass
class TcnLayerParams:
    W: Param  # (D_out, D_in, kernel)
    b: Param
    gamma: Param
    beta: Param
    running_mean: np.ndarray = None
    running_var: np.ndarray = None

    def __post_init__(self):
        if self.W.value.ndim != 3 or self.W.shape[2] < 1:
            raise ValueError("conv filter must be (D_out, D_in, kernel) with kernel >= 1")
        d_out = self.W.shape[0]
        for p in (self.b, self.gamma, self.beta):
            if p.shape != (d_out,):
                raise ValueError(f"{p.name} must have shape {(d_out,)}")
        if self.running_mean is None:
            self.running_mean = np.zeros(d_out)
        if self.running_var is None:
            self.running_var = np.ones(d_out)

    @property
    def kernel(self) -> int:
        return self.W.shape[2]

    @property
    def out_channels(self) -> int:
        return self.W.shape[0]

    def params(self) -> list[Param]:
        return [self.W, self.b, self.gamma, self.beta]


@dataclass
class LinearParams:
    W: Param  # (K, D_in)
    b: Param

    def params(self) -> list[Param]:
        return [self.W, self.b]


@dataclass
class ViewEncoderParams:
    lstm: LstmParams
    attention: AttentionParams
    tcn: list[TcnLayerParams]
    classifier: LinearParams
    prefix: str = ""

    def __post_init__(self):
        width = self.lstm.hidden_size + self.tcn[-1].out_channels
        if self.classifier.W.shape[1] != width:
            raise ValueError(f"classifier expects width {self.classifier.W.shape[1]}, encoder gives {width}")

    @property
    def width(self) -> int:
        return self.lstm.hidden_size + self.tcn[-1].out_channels

    @property
    def n_classes(self) -> int:
        return self.classifier.W.shape[0]

    def params(self) -> list[Param]:
        out = self.lstm.params() + self.attention.params()
        for layer in self.tcn:
            out += layer.params()
        return out + self.classifier.params()

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for m, layer in enumerate(self.tcn):
            out[f"{self.prefix}tcn{m}.running_mean"] = layer.running_mean
            out[f"{self.prefix}tcn{m}.running_var"] = layer.running_var
        return out

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    a = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-a, a, size=shape)


def init_view_encoder(
    rng: np.random.Generator,
    input_dim: int,
    length: int,
    n_classes: int,
    d_global: int = 64,
    conv_channels=(64, 128, 64),
    conv_kernels=(7, 5, 3),
    prefix: str = "",
) -> ViewEncoderParams:
    """Fresh parameters: U(-1/sqrt(fan_in), +) weights, zero biases, BN at identity."""
    if len(conv_channels) != len(conv_kernels) or not conv_channels:
        raise ValueError("conv_channels and conv_kernels must be non-empty and equal length")
    if length - sum(k - 1 for k in conv_kernels) < 1:
        raise ValueError(f"sequence length {length} too short for kernels {tuple(conv_kernels)}")
    d = d_global
    lstm = {}
    for g in GATES:
        lstm[f"W_{g}"] = Param(f"{prefix}lstm.W_{g}", _uniform(rng, (d, input_dim), input_dim))
    for g in GATES:
        lstm[f"U_{g}"] = Param(f"{prefix}lstm.U_{g}", _uniform(rng, (d, d), d))
    for g in GATES:
        lstm[f"b_{g}"] = Param(f"{prefix}lstm.b_{g}", np.zeros(d))
    attention = AttentionParams(Param(f"{prefix}attn.logits", np.zeros(length)))
    tcn = []
    d_in = input_dim
    for m, (d_out, k) in enumerate(zip(conv_channels, conv_kernels)):
        tcn.append(
            TcnLayerParams(
                W=Param(f"{prefix}tcn{m}.W", _uniform(rng, (d_out, d_in, k), d_in * k)),
                b=Param(f"{prefix}tcn{m}.b", np.zeros(d_out)),
                gamma=Param(f"{prefix}tcn{m}.gamma", np.ones(d_out)),
                beta=Param(f"{prefix}tcn{m}.beta", np.zeros(d_out)),
            )
        )
        d_in = d_out
    width = d + d_in
    clf = LinearParams(
        Param(f"{prefix}clf.W", _uniform(rng, (n_classes, width), width)),
        Param(f"{prefix}clf.b", np.zeros(n_classes)),
    )
    return ViewEncoderParams(LstmParams(**lstm), attention, tcn, clf, prefix=prefix)


# ---------------------------------------------------------------------------
# LSTM


def lstm_forward(X, p: LstmParams, h0=None, c0=None):
    """Run the LSTM over ``X``; returns ``(H, cache)`` with H of shape (..., T, d)."""
    X, single = _batched(X)
    B, T, D = X.shape
    if D != p.input_size:
        raise ValueError(f"LSTM expects input width {p.input_size}, got {D}")
    d = p.hidden_size
    W, U, b = p.stacked()
    h = np.zeros((B, d)) if h0 is None else np.broadcast_to(as_tensor(h0), (B, d)).copy()
    c = np.zeros((B, d)) if c0 is None else np.broadcast_to(as_tensor(c0), (B, d)).copy()
    xw = X @ W.T + b
    H = np.empty((B, T, d))
    C = np.empty((B, T, d))
    gates = np.empty((B, T, 4 * d))
    h_prev = np.empty((B, T, d))
    c_prev = np.empty((B, T, d))
    for t in range(T):
        h_prev[:, t] = h
        c_prev[:, t] = c
        z = xw[:, t] + h @ U.T
        a = np.empty_like(z)
        a[:, : 3 * d] = sigmoid(z[:, : 3 * d])
        a[:, 3 * d :] = np.tanh(z[:, 3 * d :])
        f, i, o, g = a[:, :d], a[:, d : 2 * d], a[:, 2 * d : 3 * d], a[:, 3 * d :]
        c = f * c + i * g
        h = o * np.tanh(c)
        gates[:, t] = a
        C[:, t] = c
        H[:, t] = h
    cache = (X, W, U, gates, C, h_prev, c_prev, single)
    return (H[0] if single else H), cache


def lstm_backward(dH, cache, p: LstmParams) -> np.ndarray:
    """Backprop through time; accumulates into ``p``'s grads and returns dX."""
    X, W, U, gates, C, h_prev, c_prev, single = cache
    dH = as_tensor(dH)
    if single:
        dH = dH[None]
    B, T, d = dH.shape
    dZ = np.empty((B, T, 4 * d))
    dU = np.zeros_like(U)
    dh_next = np.zeros((B, d))
    dc_next = np.zeros((B, d))
    for t in range(T - 1, -1, -1):
        a = gates[:, t]
        f, i, o, g = a[:, :d], a[:, d : 2 * d], a[:, 2 * d : 3 * d], a[:, 3 * d :]
        tc = np.tanh(C[:, t])
        dh = dH[:, t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dz = dZ[:, t]
        dz[:, :d] = dc * c_prev[:, t] * sigmoid_grad(f)
        dz[:, d : 2 * d] = dc * g * sigmoid_grad(i)
        dz[:, 2 * d : 3 * d] = dh * tc * sigmoid_grad(o)
        dz[:, 3 * d :] = dc * i * tanh_grad(g)
        dU += dz.T @ h_prev[:, t]
        dh_next = dz @ U
        dc_next = dc * f
    dW = np.einsum("btg,btd->gd", dZ, X)
    db = dZ.sum(axis=(0, 1))
    for k, g in enumerate(GATES):
        sl = slice(k * d, (k + 1) * d)
        getattr(p, f"W_{g}").grad += dW[sl]
        getattr(p, f"U_{g}").grad += dU[sl]
        getattr(p, f"b_{g}").grad += db[sl]
    dX = dZ @ W
    return dX[0] if single else dX


# ---------------------------------------------------------------------------
# attention pooling


def attention_pool(Hseq, a: AttentionParams):
    """Convex combination of hidden states with weights softmax(logits)."""
    Hseq, single = _batched(Hseq)
    if Hseq.shape[1] != a.length:
        raise ValueError(f"attention has {a.length} steps, sequence has {Hseq.shape[1]}")
    w = a.weights
    Hg = np.einsum("t,btd->bd", w, Hseq)
    cache = (Hseq, w, single)
    return (Hg[0] if single else Hg), cache


def attention_backward(dHg, cache, a: AttentionParams) -> np.ndarray:
    Hseq, w, single = cache
    dHg = as_tensor(dHg)
    if single:
        dHg = dHg[None]
    dw = np.einsum("bd,btd->t", dHg, Hseq)
    a.logits.grad += w * (dw - np.dot(w, dw))
    dH = w[None, :, None] * dHg[:, None, :]
    return dH[0] if single else dH


# ---------------------------------------------------------------------------
# convolution block: BN(ReLU(W * F + b))


def conv1d(F: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Valid, stride-1 temporal convolution of (B, T, D_in) with (D_out, D_in, k)."""
    d_out, d_in, k = W.shape
    if F.shape[1] < k:
        raise ValueError(f"input length {F.shape[1]} shorter than kernel {k}")
    if F.shape[2] != d_in:
        raise ValueError(f"conv expects {d_in} input channels, got {F.shape[2]}")
    cols = np.lib.stride_tricks.sliding_window_view(F, k, axis=1)  # (B, T', D_in, k)
    B, Tp = cols.shape[:2]
    return cols.reshape(B, Tp, d_in * k) @ W.reshape(d_out, -1).T + b


def conv1d_block(F_prev, layer: TcnLayerParams, mode: str = "train", momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
    """One local-temporal layer.

    Returns ``(out, cache, running)`` where ``running`` is the updated
    ``(mean, var)`` pair in train mode and the unchanged pair in infer mode.
    The layer itself is never mutated.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    F, single = _batched(F_prev)
    y = conv1d(F, layer.W.value, layer.b.value)
    a = relu(y)
    if mode == "train":
        mean = a.mean(axis=(0, 1))
        var = a.var(axis=(0, 1))
        running = (
            momentum * layer.running_mean + (1.0 - momentum) * mean,
            momentum * layer.running_var + (1.0 - momentum) * var,
        )
    else:
        mean, var = layer.running_mean, layer.running_var
        running = (layer.running_mean, layer.running_var)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (a - mean) * inv_std
    out = layer.gamma.value * xhat + layer.beta.value
    cache = (F, y, xhat, inv_std, mode, single)
    return (out[0] if single else out), cache, running


def conv1d_block_backward(dout, cache, layer: TcnLayerParams) -> np.ndarray:
    F, y, xhat, inv_std, mode, single = cache
    dout = as_tensor(dout)
    if single:
        dout = dout[None]
    layer.gamma.grad += (dout * xhat).sum(axis=(0, 1))
    layer.beta.grad += dout.sum(axis=(0, 1))
    dxhat = dout * layer.gamma.value
    if mode == "train":
        n = dout.shape[0] * dout.shape[1]
        da = (inv_std / n) * (
            n * dxhat - dxhat.sum(axis=(0, 1)) - xhat * (dxhat * xhat).sum(axis=(0, 1))
        )
    else:
        da = dxhat * inv_std
    dy = da * (y > 0)
    W = layer.W.value
    d_out, d_in, k = W.shape
    B, Tp, _ = dy.shape
    cols = np.lib.stride_tricks.sliding_window_view(F, k, axis=1).reshape(B * Tp, d_in * k)
    dyf = dy.reshape(B * Tp, d_out)
    layer.W.grad += (dyf.T @ cols).reshape(W.shape)
    layer.b.grad += dyf.sum(axis=0)
    dcols = (dyf @ W.reshape(d_out, -1)).reshape(B, Tp, d_in, k)
    dF = np.zeros_like(F)
    for j in range(k):
        dF[:, j : j + Tp] += dcols[..., j]
    return dF[0] if single else dF


# ---------------------------------------------------------------------------
# pooling, view encoder, classifier


def global_avg_pool(F_M) -> np.ndarray:
    F_M = as_tensor(F_M)
    if F_M.shape[-2] < 1:
        raise ValueError("cannot pool an empty sequence")
    return F_M.mean(axis=-2)


def global_avg_pool_backward(dHl, length: int) -> np.ndarray:
    dHl = as_tensor(dHl)
    return np.repeat(dHl[..., None, :], length, axis=-2) / length


@dataclass
class EncoderCache:
    lstm: tuple
    attn: tuple
    convs: list
    conv_len: int
    width_g: int
    single: bool
    running: list = field(default_factory=list)


def encode_view(X, p: ViewEncoderParams, mode: str = "train"):
    """``concat(H_g, H_l)``; returns ``(H, cache)``.

    ``cache.running`` holds the batch-norm running statistics this pass would
    commit; :func:`commit_running_stats` applies them.
    """
    X, single = _batched(X)
    Hseq, lstm_cache = lstm_forward(X, p.lstm)
    Hg, attn_cache = attention_pool(Hseq, p.attention)
    F = X
    convs, running = [], []
    for layer in p.tcn:
        F, c, r = conv1d_block(F, layer, mode)
        convs.append(c)
        running.append(r)
    Hl = global_avg_pool(F)
    H = np.concatenate([Hg, Hl], axis=1)
    cache = EncoderCache(lstm_cache, attn_cache, convs, F.shape[1], Hg.shape[1], single, running)
    return (H[0] if single else H), cache


def encode_view_backward(dH, cache: EncoderCache, p: ViewEncoderParams) -> None:
    dH = as_tensor(dH)
    if cache.single:
        dH = dH[None]
    dHg, dHl = dH[:, : cache.width_g], dH[:, cache.width_g :]
    dHseq = attention_backward(dHg, cache.attn, p.attention)
    lstm_backward(dHseq, cache.lstm, p.lstm)
    dF = global_avg_pool_backward(dHl, cache.conv_len)
    for layer, c in zip(reversed(p.tcn), reversed(cache.convs)):
        dF = conv1d_block_backward(dF, c, layer)


def commit_running_stats(p: ViewEncoderParams, cache: EncoderCache) -> None:
    for layer, (mean, var) in zip(p.tcn, cache.running):
        layer.running_mean = mean
        layer.running_var = var


def view_logits(H, clf: LinearParams) -> np.ndarray:
    H = as_tensor(H)
    if H.shape[-1] != clf.W.shape[1]:
        raise ValueError(f"classifier expects width {clf.W.shape[1]}, got {H.shape[-1]}")
    return H @ clf.W.value.T + clf.b.value


def classify_view(H, clf: LinearParams) -> np.ndarray:
    return softmax(view_logits(H, clf))


def predict_view(X, p: ViewEncoderParams, mode: str = "infer") -> np.ndarray:
    """Class probabilities for view input ``X``."""
    H, _ = encode_view(X, p, mode)
    return classify_view(H, p.classifier)


def view_loss_and_grads(X, y, p: ViewEncoderParams, mode: str = "train"):
    """Mean cross-entropy of the view classifier; fills every ``Param.grad`` in ``p``.

    Returns ``(loss, probs, cache)``; gradients are overwritten, not accumulated.
    """
    X, _ = _batched(X)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if X.shape[0] == 0 or y.size == 0:
        raise ValueError("empty batch")
    if y.size != X.shape[0]:
        raise ValueError(f"{X.shape[0]} samples but {y.size} labels")
    p.zero_grad()
    H, cache = encode_view(X, p, mode)
    loss, probs, dlogits = softmax_cross_entropy(view_logits(H, p.classifier), y)
    p.classifier.W.grad += dlogits.T @ H
    p.classifier.b.grad += dlogits.sum(axis=0)
    encode_view_backward(dlogits @ p.classifier.W.value, cache, p)
    return loss, probs, cache
