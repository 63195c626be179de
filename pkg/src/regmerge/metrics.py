"""Evaluation metrics (sklearn wrappers): accuracy, macro-F1, Matthews.

Macro-F1 averages only over classes present in the reference labels, with
an optional restricted class set for OOD evaluation of shared classes.
"""

from __future__ import annotations

import numpy as np
from sklearn.metrics import f1_score, matthews_corrcoef

METRIC_KINDS = ("accuracy", "macro_f1", "matthews")


def metric(predictions, labels, kind: str = "accuracy",
           restrict_classes=None) -> float:
    preds = np.asarray(predictions)
    refs = np.asarray(labels)
    if preds.shape != refs.shape:
        raise ValueError(f"shape mismatch: {preds.shape} vs {refs.shape}")
    if preds.size == 0:
        raise ValueError("empty inputs")
    if kind == "accuracy":
        return float((preds == refs).mean())
    if kind == "matthews":
        if preds.ndim != 1:
            raise ValueError("matthews requires flat single-label inputs")
        return float(matthews_corrcoef(refs, preds))
    if kind != "macro_f1":
        raise ValueError(f"unknown metric kind: {kind!r}")
    if preds.ndim == 2:
        # multi-label 0/1 indicator matrices; average per-class F1
        present = [c for c in range(refs.shape[1]) if refs[:, c].any()]
        classes = present if restrict_classes is None else \
            [c for c in restrict_classes if c < refs.shape[1]]
        if not classes:
            raise ValueError("no classes to score")
        scores = [f1_score(refs[:, c], preds[:, c], zero_division=0) for c in classes]
        return float(np.mean(scores))
    classes = sorted(np.unique(refs).tolist()) if restrict_classes is None \
        else sorted(restrict_classes)
    return float(f1_score(refs, preds, labels=classes, average="macro",
                          zero_division=0))
