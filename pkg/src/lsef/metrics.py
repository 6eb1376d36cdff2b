"""Recognition and regression metrics: WAR, UAR, per-class recall, RMSE."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datagen import NUM_CLASSES
from .errors import DimensionError, UsageError


@dataclass
class MetricsBundle:
    war: float = math.nan
    uar: float = math.nan
    per_class_recall: list = None
    rmse_valence: float = math.nan
    rmse_arousal: float = math.nan
    rmse_overall: float = math.nan

    def format_fields(self, prefix=""):
        fields = []
        if not math.isnan(self.war):
            fields.append(f"{prefix}war={self.war!r}")
            fields.append(f"{prefix}uar={self.uar!r}")
        if not math.isnan(self.rmse_overall):
            fields.append(f"{prefix}rmse_val={self.rmse_valence!r}")
            fields.append(f"{prefix}rmse_aro={self.rmse_arousal!r}")
            fields.append(f"{prefix}rmse_all={self.rmse_overall!r}")
        return fields


def compute_war_uar(preds, labels):
    """WAR = overall accuracy; UAR = mean recall over classes present.

    Recall for a class absent from the ground truth is reported as NaN and
    excluded from UAR.
    """
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise UsageError(f"preds {preds.shape} and labels {labels.shape} must be equal 1-D")
    if preds.size == 0:
        raise UsageError("empty prediction list")
    if labels.min() < 0 or labels.max() >= NUM_CLASSES:
        raise UsageError(f"labels must lie in 0..{NUM_CLASSES - 1}")
    war = float((preds == labels).mean())
    recalls = []
    present = []
    for c in range(NUM_CLASSES):
        mask = labels == c
        if mask.any():
            recall = float((preds[mask] == c).mean())
            recalls.append(recall)
            present.append(recall)
        else:
            recalls.append(math.nan)
    uar = float(np.mean(present))
    return war, uar, recalls


def compute_rmse(preds, truths):
    """Per-dimension RMSE pooled over all frames (and samples); overall = mean.

    Accepts one trajectory (T, 2) or a stack (S, T, 2).
    """
    preds = np.asarray(preds, dtype=np.float64)
    truths = np.asarray(truths, dtype=np.float64)
    if preds.shape != truths.shape:
        raise DimensionError(f"prediction {preds.shape} vs truth {truths.shape}")
    if preds.ndim == 2:
        preds = preds[None]
        truths = truths[None]
    if preds.ndim != 3 or preds.shape[-1] != 2:
        raise DimensionError(f"expected (S, T, 2) trajectories, got {preds.shape}")
    err = preds - truths
    rmse_valence = float(np.sqrt((err[..., 0] ** 2).mean()))
    rmse_arousal = float(np.sqrt((err[..., 1] ** 2).mean()))
    return rmse_valence, rmse_arousal, (rmse_valence + rmse_arousal) / 2.0


def categorical_bundle(preds, labels):
    war, uar, recalls = compute_war_uar(preds, labels)
    return MetricsBundle(war=war, uar=uar, per_class_recall=recalls)


def regression_bundle(preds, truths):
    val, aro, overall = compute_rmse(preds, truths)
    return MetricsBundle(rmse_valence=val, rmse_arousal=aro, rmse_overall=overall)
