"""Brute-force reference implementations for tests and the verify command.

Nothing here touches the autodiff engine's fast paths: everything is explicit
loops over plain float64 arrays.
"""

from __future__ import annotations

import math
from collections import deque
from typing import Callable

import numpy as np

from .searchspace import FeatureRef


def naive_conv2d(x: np.ndarray, w: np.ndarray, bias: np.ndarray | None = None,
                 stride: int = 1, padding: int = 0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    assert c == ci
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for b in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if bias is None else float(bias[o])
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                yy = i * stride + u - padding
                                xx = j * stride + v - padding
                                if 0 <= yy < h and 0 <= xx < wd:
                                    acc += w[o, ch, u, v] * x[b, ch, yy, xx]
                    out[b, o, i, j] = acc
    return out


def naive_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Per-pixel evaluation: sample at ``(h_out/H_out*H_in, w_out/W_out*W_in)``.

    The four floor/ceil corners are weighted by the distance to the opposite
    corner; ceil indices past the border are clamped to the last row/column.
    """
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    out = np.zeros((n, c, out_h, out_w))
    for ho in range(out_h):
        hin = ho / out_h * h
        h0 = math.floor(hin)
        h1 = math.ceil(hin)
        fh = hin - h0
        for wo in range(out_w):
            win = wo / out_w * w
            w0 = math.floor(win)
            w1 = math.ceil(win)
            fw = win - w0
            corners = [
                (h0, w0, (1 - fh) * (1 - fw)),
                (h1, w0, fh * (1 - fw)),
                (h0, w1, (1 - fh) * fw),
                (h1, w1, fh * fw),
            ]
            for hy, wx, weight in corners:
                if weight == 0.0:
                    continue
                out[:, :, ho, wo] += weight * x[:, :, min(hy, h - 1), min(wx, w - 1)]
    return out


def naive_align_corners_bilinear(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """The align-corners sampling convention; used only as a mutation for the verify suite."""
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    out = np.zeros((n, c, out_h, out_w))
    for ho in range(out_h):
        hin = ho * (h - 1) / (out_h - 1) if out_h > 1 else 0.0
        h0, fh = math.floor(hin), hin - math.floor(hin)
        for wo in range(out_w):
            win = wo * (w - 1) / (out_w - 1) if out_w > 1 else 0.0
            w0, fw = math.floor(win), win - math.floor(win)
            h1, w1 = min(h0 + 1, h - 1), min(w0 + 1, w - 1)
            out[:, :, ho, wo] = ((1 - fh) * (1 - fw) * x[:, :, h0, w0] + fh * (1 - fw) * x[:, :, h1, w0]
                                 + (1 - fh) * fw * x[:, :, h0, w1] + fh * fw * x[:, :, h1, w1])
    return out


def naive_concat_conv(inputs: list[np.ndarray], block_kernels: list[np.ndarray],
                      bias: np.ndarray | None = None, padding: int = 0) -> np.ndarray:
    """Concatenate inputs along channels and convolve once with the block-assembled kernel."""
    x = np.concatenate([np.asarray(a, dtype=np.float64) for a in inputs], axis=1)
    w = np.concatenate([np.asarray(k, dtype=np.float64) for k in block_kernels], axis=1)
    return naive_conv2d(x, w, bias, 1, padding)


def conv_each_then_sum(inputs: list[np.ndarray], block_kernels: list[np.ndarray],
                       padding: int = 0) -> np.ndarray:
    return sum(naive_conv2d(a, k, None, 1, padding) for a, k in zip(inputs, block_kernels))


def finite_diff(loss_fn: Callable[[], float], leaf: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. every entry of ``leaf`` (perturbed in place)."""
    grad = np.zeros(leaf.shape, dtype=np.float64)
    flat = leaf.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(loss_fn())
        flat[i] = orig - h
        down = float(loss_fn())
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """``max|a-b| / max(max|a|, max|b|, floor)``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def reachability_prune(num_stages: int, edges: dict[tuple[int, FeatureRef], float], sigma: float,
                       output_fallback: bool = False) -> tuple[dict[int, set[FeatureRef]], int | None]:
    """Worklist formulation of the three pruning rules on an explicit edge list.

    Returns ``(stage -> kept inputs, output stage)``; ``({}, None)`` when the
    decoder collapses.
    """
    inputs: dict[int, set[FeatureRef]] = {l: set() for l in range(1, num_stages + 1)}
    for (l, t), w in edges.items():
        if not w < sigma:
            inputs[l].add(t)
    consumers: dict[int, set[int]] = {l: set() for l in inputs}
    for l, srcs in inputs.items():
        for t in srcs:
            if t.kind == "D":
                consumers[t.index].add(l)
    alive = set(inputs)

    # rule 2 cascade: a dead stage removes itself from its consumers' inputs
    work = deque(l for l in sorted(alive) if not inputs[l])
    while work:
        l = work.popleft()
        if l not in alive:
            continue
        alive.discard(l)
        for c in sorted(consumers[l]):
            inputs[c].discard(FeatureRef("D", l))
            if c in alive and not inputs[c]:
                work.append(c)
        for t in inputs[l]:
            if t.kind == "D":
                consumers[t.index].discard(l)
        inputs[l] = set()

    if 1 in alive:
        out = 1
    elif output_fallback and alive:
        out = min(alive)
    else:
        return {}, None

    # rule 3 cascade: reachability backwards from the output stage
    reach: set[int] = set()
    frontier = deque([out])
    while frontier:
        l = frontier.popleft()
        if l in reach:
            continue
        reach.add(l)
        for t in inputs[l]:
            if t.kind == "D" and t.index in alive:
                frontier.append(t.index)
    return {l: set(inputs[l]) for l in sorted(reach)}, out
