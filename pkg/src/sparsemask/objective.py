"""Task loss, binarizing sparse loss on connection gates, and the combined objective."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor, absolute, as_tensor, clamp, log, stack, tmean, tsum

DEFAULT_LAMBDA = 0.01
IGNORE_INDEX = 255


@dataclass
class SparseLossConfig:
    lam: float = DEFAULT_LAMBDA
    alpha_override: dict[int, float] = field(default_factory=dict)
    clamp_eps: float = 1e-6
    regularizer: str = "sparse"  # or "l1"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not 0 < self.clamp_eps <= 1e-3:
            raise ValueError("clamp_eps must lie in (0, 1e-3]")
        if self.regularizer not in ("sparse", "l1"):
            raise ValueError(f"unknown regularizer {self.regularizer!r}")


def l_m(p, q, clamp_eps: float = 1e-6):
    """Binary cross-entropy ``-p log q - (1-p) log(1-q)`` with ``q`` clamped away from 0 and 1.

    Accepts tensors (differentiable) or plain floats/arrays.
    """
    if not isinstance(p, Tensor) and not isinstance(q, Tensor):
        q = np.clip(np.asarray(q, dtype=np.float64), clamp_eps, 1 - clamp_eps)
        p = np.asarray(p, dtype=np.float64)
        out = -p * np.log(q) - (1 - p) * np.log(1 - q)
        return float(out) if out.ndim == 0 else out
    q = clamp(as_tensor(q), clamp_eps, 1 - clamp_eps)
    return -(p * log(q)) - (1 - p) * log(1 - q)


def _as_vector(w) -> Tensor:
    if isinstance(w, Tensor):
        return w
    if isinstance(w, (list, tuple)) and w and isinstance(w[0], Tensor):
        return stack(list(w))
    return Tensor(np.asarray(w, dtype=np.float64))


def sparse_loss(w_l, alpha: float, clamp_eps: float = 1e-6) -> Tensor:
    """Mean per-gate binarization term plus a term pulling the gate mean toward ``alpha``."""
    w = _as_vector(w_l)
    if w.size == 0:
        raise ValueError("sparse_loss needs at least one gate")
    binarize = tmean(l_m(w, w, clamp_eps))
    ratio = l_m(alpha, tmean(w), clamp_eps)
    return binarize + ratio


def l1_loss(w_l) -> Tensor:
    """Comparison baseline: sum of absolute gate values."""
    return tsum(absolute(_as_vector(w_l)))


def alpha_for_stage(candidate_count: int) -> float:
    """Target gate mean so a stage tends to keep two inputs, capped at one half."""
    if candidate_count < 1:
        raise ValueError("candidate_count must be >= 1")
    return min(2.0 / candidate_count, 0.5)


def task_loss(logits: Tensor, labels: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    return ops.softmax_cross_entropy(logits, labels, ignore_index)


def regularizer_loss(gates_by_stage: Mapping[int, Sequence[Tensor] | Tensor], cfg: SparseLossConfig) -> Tensor:
    """Sum over stages of the per-stage gate regularizer (not yet multiplied by lambda)."""
    total = None
    for l in sorted(gates_by_stage):
        w = _as_vector(gates_by_stage[l])
        if cfg.regularizer == "l1":
            term = l1_loss(w)
        else:
            alpha = cfg.alpha_override.get(l, alpha_for_stage(w.size))
            term = sparse_loss(w, alpha, cfg.clamp_eps)
        total = term if total is None else total + term
    return total


def total_loss(task: Tensor, gates_by_stage: Mapping[int, Sequence[Tensor] | Tensor],
               cfg: SparseLossConfig | None = None) -> Tensor:
    """``task + lambda * sum_l L_s(w_l, alpha_l)``."""
    cfg = cfg or SparseLossConfig()
    if cfg.lam == 0 or not gates_by_stage:
        return task
    reg = regularizer_loss(gates_by_stage, cfg)
    return task + reg * cfg.lam
