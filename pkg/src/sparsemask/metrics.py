"""Segmentation and saliency metrics, plus the metrics CSV writer."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int, ignore_id: int = 255) -> np.ndarray:
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction size {pred.size} != ground-truth size {gt.size}")
    keep = gt != ignore_id
    pred, gt = pred[keep], gt[keep]
    return np.bincount(gt * num_classes + pred, minlength=num_classes ** 2).reshape(num_classes, num_classes)


def miou(pred, gt, num_classes: int, ignore_id: int = 255) -> float:
    """Mean IoU over classes that appear in the prediction or the ground truth."""
    if np.shape(pred) != np.shape(gt):
        raise ValueError(f"shape mismatch {np.shape(pred)} vs {np.shape(gt)}")
    cm = confusion_matrix(pred, gt, num_classes, ignore_id)
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    present = union > 0
    if not present.any():
        return 1.0
    return float(np.mean(tp[present] / union[present]))


def pixel_acc(pred, gt, num_classes: int | None = None, ignore_id: int = 255) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    keep = gt != ignore_id
    total = int(keep.sum())
    return 1.0 if total == 0 else float((pred[keep] == gt[keep]).sum() / total)


def mae(pred_prob, gt_binary) -> float:
    pred_prob = np.asarray(pred_prob, dtype=np.float64)
    gt_binary = np.asarray(gt_binary, dtype=np.float64)
    if pred_prob.shape != gt_binary.shape:
        raise ValueError(f"shape mismatch {pred_prob.shape} vs {gt_binary.shape}")
    return float(np.mean(np.abs(pred_prob - gt_binary)))


def f_beta(pred_prob, gt_binary, beta2: float = 0.3, num_thresholds: int = 255) -> float:
    """Best F-measure over thresholds ``k / num_thresholds`` for ``k = 1..num_thresholds``.

    A pixel is predicted positive when its probability is at or above the
    threshold. Precision with no positive predictions counts as 0.
    """
    p = np.asarray(pred_prob, dtype=np.float64).reshape(-1)
    g = np.asarray(gt_binary).reshape(-1) > 0
    if p.shape != g.shape:
        raise ValueError("shape mismatch between prediction and ground truth")
    thresholds = np.arange(1, num_thresholds + 1) / num_thresholds
    order = np.argsort(-p, kind="stable")
    ps, gs = p[order], g[order]
    tp_cum = np.concatenate([[0], np.cumsum(gs)])
    # number of pixels with p >= t, found on the descending-sorted array
    n_pos = np.searchsorted(-ps, -thresholds, side="right")
    tp = tp_cum[n_pos].astype(np.float64)
    positives = float(g.sum())
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(n_pos > 0, tp / np.maximum(n_pos, 1), 0.0)
        recall = tp / positives if positives > 0 else np.zeros_like(tp)
        denom = beta2 * precision + recall
        f = np.where(denom > 0, (1 + beta2) * precision * recall / np.where(denom > 0, denom, 1), 0.0)
    return float(f.max())


class MetricsLog:
    """Rows of ``(epoch, split, metric, value)`` written as CSV."""

    def __init__(self, digest: str = ""):
        self.rows: list[tuple[int, str, str, float]] = []
        self.digest = digest

    def add(self, epoch: int, split: str, metric: str, value: float) -> None:
        self.rows.append((int(epoch), split, metric, float(value)))

    def last(self, split: str, metric: str) -> float | None:
        for e, s, m, v in reversed(self.rows):
            if s == split and m == metric:
                return v
        return None

    def series(self, split: str, metric: str) -> list[float]:
        return [v for _, s, m, v in self.rows if s == split and m == metric]

    def write(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            if self.digest:
                fh.write(f"# config_digest={self.digest}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "split", "metric", "value"])
            for e, s, m, v in self.rows:
                w.writerow([e, s, m, repr(v)])

    @classmethod
    def read(cls, path: str | Path) -> "MetricsLog":
        log = cls()
        with open(path, newline="") as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
        for row in csv.DictReader(lines):
            log.add(int(row["epoch"]), row["split"], row["metric"], float(row["value"]))
        return log
