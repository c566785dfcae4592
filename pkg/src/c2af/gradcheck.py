"""Finite-difference check of every trainable tensor in a tiny full network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import finite_diff_check
from .encoder import init_view_encoder, predict_view, view_loss_and_grads
from .fusion import HEAD_MODES, fusion_loss_and_grads, init_fusion

THRESHOLD = 1e-4


@dataclass
class GradcheckSpec:
    n_views: int = 3
    n_classes: int = 4
    length: int = 8
    input_dim: int = 3
    d_global: int = 4
    conv_channels: tuple = (4, 4)
    conv_kernels: tuple = (3, 3)
    n_kernels: int = 2
    batch: int = 6
    samples: int = 20


def _perturb(rng, param, scale):
    param.value[...] = rng.normal(0.0, scale, param.value.shape)


def build_tiny_network(seed: int, spec: GradcheckSpec | None = None):
    """Encoders and heads with non-trivial attention, BN affine and bias values."""
    spec = spec or GradcheckSpec()
    rng = np.random.default_rng(seed)
    views = []
    for v in range(spec.n_views):
        enc = init_view_encoder(
            rng, spec.input_dim, spec.length, spec.n_classes, spec.d_global,
            spec.conv_channels, spec.conv_kernels, prefix=f"view{v}.",
        )
        _perturb(rng, enc.attention.logits, 1.0)
        for layer in enc.tcn:
            layer.gamma.value[...] = rng.uniform(0.5, 1.5, layer.gamma.shape)
            _perturb(rng, layer.beta, 0.5)
            _perturb(rng, layer.b, 0.3)
        for p in enc.lstm.params():
            if ".b_" in p.name:
                _perturb(rng, p, 0.3)
        _perturb(rng, enc.classifier.b, 0.3)
        views.append(enc)
    heads = {}
    for mode in HEAD_MODES:
        head = init_fusion(rng, spec.n_views, spec.n_classes, mode, spec.n_kernels)
        for p in head.params():
            if p.name.endswith("b"):
                _perturb(rng, p, 0.5)
        heads[mode] = head
    X = [rng.normal(size=(spec.batch, spec.length, spec.input_dim)) for _ in range(spec.n_views)]
    y = rng.integers(0, spec.n_classes, spec.batch)
    return views, heads, X, y


def run_gradcheck(seed: int = 0, eps: float = 1e-5, spec: GradcheckSpec | None = None) -> dict[str, float]:
    """Max relative error per parameter tensor, views via their own loss, heads via the fused loss."""
    spec = spec or GradcheckSpec()
    views, heads, X, y = build_tiny_network(seed, spec)
    rng = np.random.default_rng(seed + 1)
    errors: dict[str, float] = {}
    for v, enc in enumerate(views):
        view_loss_and_grads(X[v], y, enc, "train")
        errors.update(
            finite_diff_check(lambda: view_loss_and_grads(X[v], y, enc, "train")[0], enc.params(), eps, spec.samples, rng)
        )
    P = np.stack([predict_view(X[v], enc, "infer") for v, enc in enumerate(views)], axis=1)
    for head in heads.values():
        fusion_loss_and_grads(P, y, head)
        errors.update(finite_diff_check(lambda: fusion_loss_and_grads(P, y, head)[0], head.params(), eps, spec.samples, rng))
    return errors


def summarize(errors: dict[str, float], threshold: float = THRESHOLD) -> tuple[bool, list[str]]:
    lines = [f"{'ok ' if e < threshold else 'BAD'} {name:32s} {e:.3e}" for name, e in errors.items()]
    return all(e < threshold for e in errors.values()), lines
