"""Accuracy, confusion matrices and the evaluation report record."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def predict_labels(probs) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest class index."""
    return np.argmax(np.asarray(probs), axis=-1)


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {labels.shape}")
    if preds.size == 0:
        raise ValueError("cannot score an empty prediction set")
    return float(np.mean(preds == labels))


def confusion(preds, labels, n_classes: int) -> np.ndarray:
    """Counts with true class on rows and predicted class on columns."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {labels.shape}")
    for arr in (preds, labels):
        if np.any(arr < 0) or np.any(arr >= n_classes):
            raise ValueError(f"class index out of range for K={n_classes}")
    out = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(out, (labels, preds), 1)
    return out


@dataclass
class EvalReport:
    mode: str
    view_accuracy: list
    fused_accuracy: float
    view_confusion: list
    fused_confusion: np.ndarray
    fingerprint: str = ""
    seed: int = 0
    step: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_predictions(cls, mode, view_probs, fused_probs, labels, n_classes, **meta) -> "EvalReport":
        view_preds = [predict_labels(p) for p in view_probs]
        fused_preds = predict_labels(fused_probs)
        return cls(
            mode=mode,
            view_accuracy=[accuracy(p, labels) for p in view_preds],
            fused_accuracy=accuracy(fused_preds, labels),
            view_confusion=[confusion(p, labels, n_classes) for p in view_preds],
            fused_confusion=confusion(fused_preds, labels, n_classes),
            **meta,
        )

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "step": self.step,
            "fingerprint": self.fingerprint,
            "view_accuracy": [float(a) for a in self.view_accuracy],
            "fused_accuracy": float(self.fused_accuracy),
            "view_confusion": [np.asarray(m).tolist() for m in self.view_confusion],
            "fused_confusion": np.asarray(self.fused_confusion).tolist(),
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            mode=d["mode"],
            view_accuracy=list(d["view_accuracy"]),
            fused_accuracy=d["fused_accuracy"],
            view_confusion=[np.asarray(m, dtype=np.int64) for m in d["view_confusion"]],
            fused_confusion=np.asarray(d["fused_confusion"], dtype=np.int64),
            fingerprint=d.get("fingerprint", ""),
            seed=d.get("seed", 0),
            step=d.get("step", 0),
            extra=d.get("extra", {}),
        )
