"""Label-correlation tensors and the channel-aware fusion head.

Per-view probability vectors are turned into K x K outer-product matrices
(one per view, then one per unordered view pair), stacked as channels, mixed
position-wise by ``N_k`` 1x1 filters with ReLU, flattened in (p, q, o) order
and classified by a linear layer with softmax.

The fusion head never propagates gradients into the view encoders: its
inputs are treated as constants.

Head modes
----------
``complete``           all V + V(V-1)/2 correlation channels, 1x1 fusion
``intra_only``         the V intra-view channels only
``inter_only``         the V(V-1)/2 inter-view channels only
``fusion_only``        no correlation matrices; the concatenated V*K
                       probabilities laid out as a 1 x (V*K) map with one channel
``no_channel_fusion``  full correlation tensor flattened straight into the
                       classifier (no 1x1 filters)
``concat``             Label-Concat baseline: linear + softmax on the V*K
                       concatenation
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .core import Param, as_tensor, relu, softmax, softmax_cross_entropy

ABLATION_MODES = ("complete", "intra_only", "inter_only", "fusion_only", "no_channel_fusion")
HEAD_MODES = ABLATION_MODES + ("concat",)
PROB_TOL = 1e-6


def n_intra(n_views: int) -> int:
    return n_views


def n_inter(n_views: int) -> int:
    return n_views * (n_views - 1) // 2


def channel_index(n_views: int) -> list[tuple[int, int]]:
    """(u, w) view pairs in channel order: diagonals first, then u < w lexicographic."""
    return [(v, v) for v in range(n_views)] + list(combinations(range(n_views), 2))


def channel_count(n_views: int, mode: str = "complete") -> int:
    if mode in ("complete", "no_channel_fusion"):
        return n_intra(n_views) + n_inter(n_views)
    if mode == "intra_only":
        return n_intra(n_views)
    if mode == "inter_only":
        return n_inter(n_views)
    if mode in ("fusion_only", "concat"):
        return 1
    raise ValueError(f"unknown fusion mode {mode!r}")


def check_probability(y, what: str = "prediction") -> np.ndarray:
    y = as_tensor(y)
    if y.ndim != 1:
        raise ValueError(f"{what} must be a vector, got shape {y.shape}")
    if np.any(y < 0) or abs(y.sum() - 1.0) > PROB_TOL:
        raise ValueError(f"{what} is not a probability vector")
    return y


def intra_matrix(y) -> np.ndarray:
    y = check_probability(y)
    return np.outer(y, y)


def inter_matrix(yu, yw) -> np.ndarray:
    yu = check_probability(yu, "first prediction")
    yw = check_probability(yw, "second prediction")
    if yu.shape != yw.shape:
        raise ValueError(f"class count mismatch: {yu.shape[0]} vs {yw.shape[0]}")
    return np.outer(yu, yw)


@dataclass
class CorrelationTensor:
    values: np.ndarray  # (K, K, C)
    index: list

    @property
    def n_channels(self) -> int:
        return self.values.shape[-1]


def stack_correlations(preds) -> CorrelationTensor:
    """Stack intra- then inter-view matrices of one sample's V predictions."""
    preds = [check_probability(y, f"view {v} prediction") for v, y in enumerate(preds)]
    if not preds:
        raise ValueError("need at least one view")
    k = preds[0].shape[0]
    if any(y.shape[0] != k for y in preds):
        raise ValueError("inconsistent class count across views")
    index = channel_index(len(preds))
    values = np.stack([np.outer(preds[u], preds[w]) for u, w in index], axis=-1)
    return CorrelationTensor(values, index)


def correlation_batch(P: np.ndarray, mode: str = "complete") -> np.ndarray:
    """Correlation channels for a batch of predictions ``P`` of shape (B, V, K).

    Returns (B, K, K, C) restricted to the channels ``mode`` uses.
    """
    P = as_tensor(P)
    n_views = P.shape[1]
    index = channel_index(n_views)
    if mode == "intra_only":
        index = index[:n_views]
    elif mode == "inter_only":
        index = index[n_views:]
    if not index:
        raise ValueError(f"mode {mode!r} has no channels with {n_views} view(s)")
    u = [a for a, _ in index]
    w = [b for _, b in index]
    return np.einsum("bcp,bcq->bpqc", P[:, u, :], P[:, w, :])


# ---------------------------------------------------------------------------
# parameters


@dataclass
class FusionParams:
    mode: str
    n_views: int
    n_classes: int
    fuse_W: Param | None  # (N_k, C)
    fuse_b: Param | None  # (N_k,)
    clf_W: Param  # (K, D_f)
    clf_b: Param

    def __post_init__(self):
        if self.mode not in HEAD_MODES:
            raise ValueError(f"unknown fusion mode {self.mode!r}")
        if self.uses_filters != (self.fuse_W is not None):
            raise ValueError(f"mode {self.mode!r} {'needs' if self.uses_filters else 'has no'} 1x1 filters")
        if self.fuse_W is not None and self.fuse_W.shape[1] != self.n_channels:
            raise ValueError(f"filters have {self.fuse_W.shape[1]} channels, input has {self.n_channels}")
        if self.clf_W.shape != (self.n_classes, self.flat_width):
            raise ValueError(f"classifier must be {(self.n_classes, self.flat_width)}, got {self.clf_W.shape}")

    @property
    def uses_filters(self) -> bool:
        return self.mode not in ("no_channel_fusion", "concat")

    @property
    def n_channels(self) -> int:
        return channel_count(self.n_views, self.mode)

    @property
    def n_kernels(self) -> int:
        return self.fuse_W.shape[0] if self.fuse_W is not None else 0

    @property
    def spatial(self) -> tuple[int, int]:
        if self.mode in ("fusion_only", "concat"):
            return 1, self.n_views * self.n_classes
        return self.n_classes, self.n_classes

    @property
    def flat_width(self) -> int:
        s1, s2 = self.spatial
        depth = self.n_kernels if self.uses_filters else self.n_channels
        return s1 * s2 * depth

    def params(self) -> list[Param]:
        out = [self.fuse_W, self.fuse_b] if self.uses_filters else []
        return out + [self.clf_W, self.clf_b]

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()


def init_fusion(
    rng: np.random.Generator,
    n_views: int,
    n_classes: int,
    mode: str = "complete",
    n_kernels: int = 8,
    prefix: str | None = None,
) -> FusionParams:
    prefix = f"fusion.{mode}." if prefix is None else prefix
    c = channel_count(n_views, mode)
    if c < 1:
        raise ValueError(f"mode {mode!r} has no channels with {n_views} view(s)")
    fuse_W = fuse_b = None
    s1, s2 = (1, n_views * n_classes) if mode in ("fusion_only", "concat") else (n_classes, n_classes)
    if mode in ("no_channel_fusion", "concat"):
        d_f = s1 * s2 * c
    else:
        fuse_W = Param(prefix + "W", rng.uniform(-1, 1, (n_kernels, c)) / np.sqrt(c))
        fuse_b = Param(prefix + "b", np.zeros(n_kernels))
        d_f = s1 * s2 * n_kernels
    clf_W = Param(prefix + "clf.W", rng.uniform(-1, 1, (n_classes, d_f)) / np.sqrt(d_f))
    clf_b = Param(prefix + "clf.b", np.zeros(n_classes))
    return FusionParams(mode, n_views, n_classes, fuse_W, fuse_b, clf_W, clf_b)


# ---------------------------------------------------------------------------
# forward / backward


def fusion_inputs(P, mode: str) -> np.ndarray:
    """Map predictions (B, V, K) to the (B, S1, S2, C) map the head consumes."""
    P = as_tensor(P)
    if P.ndim != 3:
        raise ValueError(f"expected predictions of shape (B, V, K), got {P.shape}")
    if mode in ("fusion_only", "concat"):
        return P.reshape(P.shape[0], 1, -1, 1)
    return correlation_batch(P, mode)


def channel_fuse(ct, fp: FusionParams) -> np.ndarray:
    """``r[p, q, o] = relu(b[o] + <W[o], ct[p, q, :]>)``; accepts a CorrelationTensor or array."""
    values = ct.values if isinstance(ct, CorrelationTensor) else as_tensor(ct)
    if fp.fuse_W is None:
        raise ValueError(f"mode {fp.mode!r} has no 1x1 filters")
    if values.shape[-1] != fp.fuse_W.shape[1]:
        raise ValueError(f"filters expect {fp.fuse_W.shape[1]} channels, got {values.shape[-1]}")
    return relu(values @ fp.fuse_W.value.T + fp.fuse_b.value)


def final_classify(r, fp: FusionParams) -> np.ndarray:
    """Flatten ``r`` row-major over (p, q, o) and apply the final linear + softmax."""
    r = as_tensor(r)
    single = r.ndim == 3
    if single:
        r = r[None]
    flat = r.reshape(r.shape[0], -1)
    if flat.shape[1] != fp.clf_W.shape[1]:
        raise ValueError(f"classifier expects {fp.clf_W.shape[1]} features, got {flat.shape[1]}")
    out = softmax(flat @ fp.clf_W.value.T + fp.clf_b.value)
    return out[0] if single else out


def _fusion_logits(P, fp: FusionParams):
    x = fusion_inputs(P, fp.mode)
    if x.shape[1:] != fp.spatial + (fp.n_channels,):
        raise ValueError(f"head expects input {fp.spatial + (fp.n_channels,)}, got {x.shape[1:]}")
    if fp.uses_filters:
        pre = x @ fp.fuse_W.value.T + fp.fuse_b.value
        r = relu(pre)
    else:
        pre = None
        r = x
    flat = r.reshape(r.shape[0], -1)
    return flat @ fp.clf_W.value.T + fp.clf_b.value, (x, pre, flat)


def fusion_predict(P, fp: FusionParams) -> np.ndarray:
    """Fused class probabilities (B, K) from per-view predictions (B, V, K)."""
    return softmax(_fusion_logits(P, fp)[0])


def fusion_loss_and_grads(P, y, fp: FusionParams) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of the fused prediction; overwrites grads of the head only.

    ``P`` is treated as a constant, so no gradient reaches the encoders.
    """
    P = as_tensor(P)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if P.shape[0] == 0 or y.size == 0:
        raise ValueError("empty batch")
    fp.zero_grad()
    logits, (x, pre, flat) = _fusion_logits(P, fp)
    loss, probs, dlogits = softmax_cross_entropy(logits, y)
    fp.clf_W.grad += dlogits.T @ flat
    fp.clf_b.grad += dlogits.sum(axis=0)
    if fp.uses_filters:
        dr = (dlogits @ fp.clf_W.value).reshape(pre.shape) * (pre > 0)
        c = x.shape[-1]
        fp.fuse_W.grad += dr.reshape(-1, fp.n_kernels).T @ x.reshape(-1, c)
        fp.fuse_b.grad += dr.reshape(-1, fp.n_kernels).sum(axis=0)
    return loss, probs


# ---------------------------------------------------------------------------
# fixed late-fusion rules


def average_fusion(P) -> np.ndarray:
    """Element-wise mean over views of predictions (B, V, K) or (V, K)."""
    return as_tensor(P).mean(axis=-2)


def max_fusion(P) -> np.ndarray:
    """Element-wise max over views of predictions (B, V, K) or (V, K)."""
    return as_tensor(P).max(axis=-2)
