"""Numerical self-checks of the engine against the brute-force oracles.

Each check returns a :class:`CheckResult` holding the worst error seen over its
random cases. ``upsample`` is injectable so a wrong resampling convention can be
shown to fail.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import ops
from .autodiff.ops import BatchNormState, ConvKernel
from .autodiff.tensor import Tensor, reshape, sigmoid, tsum
from .errors import ArchitectureError
from .objective import alpha_for_stage, l_m, sparse_loss, task_loss
from .oracles import (
    conv_each_then_sum,
    finite_diff,
    naive_align_corners_bilinear,
    naive_bilinear,
    naive_concat_conv,
    naive_conv2d,
    reachability_prune,
    relative_error,
)
from .pruner import prune
from .searchspace import GateMatrix, candidate_sets, total_gate_count

Upsample = Callable[[Tensor, int, int], Tensor]


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error)) and self.error <= self.tol


def align_corners_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """A deliberately wrong resampler (corner-aligned grid), for mutation tests."""
    return Tensor(naive_align_corners_bilinear(x.data, out_h, out_w).astype(x.dtype))


def _t(a: np.ndarray, dtype, grad: bool = False) -> Tensor:
    return Tensor(np.asarray(a, dtype=dtype), requires_grad=grad)


# -- operator equivalences -------------------------------------------------
def concat_conv_error(rng: np.random.Generator, cases: int = 100, dtype=np.float64) -> float:
    """Concat-then-conv against conv-each-then-sum, 3x3 kernels, M in {2, 3}."""
    worst = 0.0
    for _ in range(cases):
        m = int(rng.integers(2, 4))
        n, co = int(rng.integers(1, 3)), int(rng.integers(1, 5))
        h, w = int(rng.integers(3, 9)), int(rng.integers(3, 9))
        cins = rng.integers(1, 5, size=m)
        xs = [rng.standard_normal((n, c, h, w)) for c in cins]
        ks = [rng.standard_normal((co, c, 3, 3)) for c in cins]
        concat = ops.conv2d(ops.concat_channels([_t(x, dtype) for x in xs]),
                            ConvKernel(_t(np.concatenate(ks, axis=1), dtype), padding=1)).data
        each = sum(ops.conv2d(_t(x, dtype), ConvKernel(_t(k, dtype), padding=1)).data for x, k in zip(xs, ks))
        ref = naive_concat_conv(xs, ks, padding=1)
        ref_each = conv_each_then_sum(xs, ks, padding=1)
        worst = max(worst, float(np.abs(concat - each).max()), float(np.abs(concat - ref).max()),
                    float(np.abs(ref - ref_each).max()))
    return worst


def commute_error(rng: np.random.Generator, cases: int = 100, dtype=np.float64,
                   upsample: Upsample = ops.bilinear_upsample) -> float:
    """Pointwise conv and 2x bilinear upsampling commute; each engine order is checked
    against the opposite order computed by the oracles."""
    worst = 0.0
    for _ in range(cases):
        n, c, co = int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
        h, w = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        x = rng.standard_normal((n, c, h, w))
        k = rng.standard_normal((co, c, 1, 1))
        b = rng.standard_normal(co)
        kern = ConvKernel(_t(k, dtype), _t(b, dtype))
        conv_up = ops.conv2d(upsample(_t(x, dtype), 2 * h, 2 * w), kern).data
        up_conv = upsample(ops.conv2d(_t(x, dtype), kern), 2 * h, 2 * w).data
        ref_up_conv = naive_bilinear(naive_conv2d(x, k, b), 2 * h, 2 * w)
        ref_conv_up = naive_conv2d(naive_bilinear(x, 2 * h, 2 * w), k, b)
        worst = max(worst, float(np.abs(conv_up - ref_up_conv).max()),
                    float(np.abs(up_conv - ref_conv_up).max()))
    return worst


def conv_error(rng, cases: int = 20, dtype=np.float64) -> float:
    worst = 0.0
    for _ in range(cases):
        k, s = int(rng.choice([1, 3])), int(rng.integers(1, 3))
        x = rng.standard_normal((2, int(rng.integers(1, 4)), int(rng.integers(4, 9)), int(rng.integers(4, 9))))
        w = rng.standard_normal((int(rng.integers(1, 4)), x.shape[1], k, k))
        b = rng.standard_normal(w.shape[0])
        got = ops.conv2d(_t(x, dtype), ConvKernel(_t(w, dtype), _t(b, dtype), s, (k - 1) // 2)).data
        worst = max(worst, float(np.abs(got - naive_conv2d(x, w, b, s, (k - 1) // 2)).max()))
    return worst


def bilinear_error(rng, cases: int = 20, upsample: Upsample = ops.bilinear_upsample) -> float:
    worst = 0.0
    for _ in range(cases):
        h, w = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        oh, ow = h * int(rng.integers(1, 5)) + int(rng.integers(0, 3)), w * int(rng.integers(1, 5))
        x = rng.standard_normal((1, 2, h, w))
        got = upsample(_t(x, np.float64), oh, ow).data
        worst = max(worst, float(np.abs(got - naive_bilinear(x, oh, ow)).max()))
    return worst


# -- gradients ---------------------------------------------------------------
def _grad_error(build: Callable[[], tuple[Callable[[], Tensor], list[Tensor]]], cases: int) -> float:
    worst = 0.0
    for _ in range(cases):
        loss_fn, leaves = build()
        loss_fn().backward()
        for leaf in leaves:
            if leaf.grad is None:
                return float("inf")
            fd = finite_diff(lambda: loss_fn().item(), leaf.data)
            worst = max(worst, relative_error(leaf.grad, fd))
    return worst


def gradient_checks(rng: np.random.Generator, cases: int = 20,
                    upsample: Upsample = ops.bilinear_upsample) -> dict[str, float]:
    """Max relative error of autodiff against central differences (h = 1e-3), per op."""
    f64 = np.float64

    def conv():
        x = _t(rng.standard_normal((2, 2, 5, 5)), f64, True)
        k = ConvKernel(_t(rng.standard_normal((3, 2, 3, 3)), f64, True), _t(rng.standard_normal(3), f64, True),
                       int(rng.integers(1, 3)), 1)
        mask = None

        def fn():
            nonlocal mask
            y = ops.conv2d(x, k)
            if mask is None:
                mask = Tensor(rng.standard_normal(y.shape))
            return tsum(y * mask)
        return fn, [x, k.weight, k.bias]

    def bilinear():
        x = _t(rng.standard_normal((1, 2, 3, 4)), f64, True)
        oh, ow = int(rng.integers(3, 9)), int(rng.integers(4, 9))
        mask = Tensor(rng.standard_normal((1, 2, oh, ow)))
        return (lambda: tsum(upsample(x, oh, ow) * mask)), [x]

    def batch_norm():
        x = _t(rng.standard_normal((3, 2, 3, 3)) * 2 + 1, f64, True)
        st = BatchNormState.fresh(2, f64)
        st.gamma.data[...] = rng.random(2) + 0.5
        st.beta.data[...] = rng.standard_normal(2)
        mask = Tensor(rng.standard_normal(x.shape))
        return (lambda: tsum(ops.batch_norm(x, st, True) * mask)), [x, st.gamma, st.beta]

    def pool():
        x = _t(rng.standard_normal((2, 3, 4, 5)), f64, True)
        mask = Tensor(rng.standard_normal((2, 3, 1, 1)))
        return (lambda: tsum(ops.global_avg_pool(x) * mask)), [x]

    def gates():
        th = _t(rng.standard_normal(4) * 2, f64, True)
        feats = Tensor(rng.standard_normal((4, 6)))
        return (lambda: tsum(reshape(sigmoid(th), (4, 1)) * feats)), [th]

    def sparse():
        th = _t(rng.standard_normal(int(rng.integers(2, 9))) * 2, f64, True)
        alpha = alpha_for_stage(th.size)
        return (lambda: sparse_loss(sigmoid(th), alpha)), [th]

    def task():
        z = _t(rng.standard_normal((2, 3, 3, 3)), f64, True)
        y = rng.integers(0, 3, size=(2, 3, 3))
        y[0, 0, 0] = 255
        return (lambda: task_loss(z, y)), [z]

    builders = {"conv2d": conv, "bilinear_upsample": bilinear, "batch_norm": batch_norm,
                "global_avg_pool": pool, "sigmoid_gates": gates, "sparse_loss": sparse, "task_loss": task}
    return {name: _grad_error(b, cases) for name, b in builders.items()}


# -- discrete checks ------------------------------------------------------------
def count_error() -> float:
    """Number of candidate-set size mismatches over L = 1..9 plus the reference totals."""
    bad = 0
    for L in range(1, 10):
        bad += sum(len(cs.sources) != 2 * (L - cs.stage) + 2 for cs in candidate_sets(L))
        bad += total_gate_count(L) != L * (L + 1)
    bad += (total_gate_count(5) != 30) + (total_gate_count(9) != 90)
    return float(bad)


def pruner_error(rng: np.random.Generator, cases: int = 200) -> float:
    """Number of random graphs where the pruner and the reachability oracle disagree."""
    bad = 0
    sigmas = (1e-3, 0.1, 0.5)
    for i in range(cases):
        L = int(rng.integers(2, 7))
        gm = GateMatrix({(cs.stage, t): float(rng.random()) for cs in candidate_sets(L) for t in cs.sources})
        sigma = sigmas[i % 3]
        try:
            got = prune(gm, sigma).kept_edges
        except ArchitectureError:
            got = set()
        ref, _ = reachability_prune(L, gm.values, sigma)
        bad += got != {(l, t) for l, s in ref.items() for t in s}
    return float(bad)


def loss_value_error() -> float:
    expect = {
        "l_m(0.5,0.5)": (l_m(0.5, 0.5), math.log(2)),
        "l_m(0.3,0.7)": (l_m(0.3, 0.7), -0.3 * math.log(0.7) - 0.7 * math.log(0.3)),
        "sparse([.5,.5])": (sparse_loss([0.5, 0.5], 0.5).item(), 2 * math.log(2)),
        "ce_uniform": (task_loss(Tensor(np.zeros((1, 4, 2, 2))), np.zeros((1, 2, 2), int)).item(), math.log(4)),
    }
    return max(abs(a - b) for a, b in expect.values())


def run_checks(seed: int = 0, upsample: Upsample = ops.bilinear_upsample,
               equivalence_cases: int = 100, grad_cases: int = 20) -> list[CheckResult]:
    results: list[CheckResult] = []

    def add(name, fn, tol):
        t0 = time.perf_counter()
        err = fn(np.random.default_rng([seed, len(results)]))
        results.append(CheckResult(name, err, tol, time.perf_counter() - t0))

    add("conv2d_vs_naive", lambda r: conv_error(r), 1e-9)
    add("conv2d_vs_naive_f32", lambda r: conv_error(r, dtype=np.float32), 1e-4)
    add("bilinear_vs_naive", lambda r: bilinear_error(r, upsample=upsample), 1e-9)
    add("concat_conv_equivalence", lambda r: concat_conv_error(r, equivalence_cases), 1e-9)
    add("concat_conv_equivalence_f32", lambda r: concat_conv_error(r, equivalence_cases, np.float32), 1e-4)
    add("pointwise_upsample_commute", lambda r: commute_error(r, equivalence_cases, upsample=upsample), 1e-9)
    add("pointwise_upsample_commute_f32",
        lambda r: commute_error(r, equivalence_cases, np.float32, upsample=upsample), 1e-4)
    t0 = time.perf_counter()
    grads = gradient_checks(np.random.default_rng([seed, 99]), grad_cases, upsample)
    per = (time.perf_counter() - t0) / len(grads)
    results += [CheckResult(f"grad_{k}", v, 1e-3, per) for k, v in grads.items()]
    add("candidate_counts", lambda r: count_error(), 0.0)
    add("pruner_vs_oracle", lambda r: pruner_error(r), 0.0)
    add("loss_values", lambda r: loss_value_error(), 1e-12)
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'max_err':>10}  {'tol':>8}  result"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.error:>10.3e}  {r.tol:>8.1e}  {'PASS' if r.passed else 'FAIL'}")
    n_ok = sum(r.passed for r in results)
    lines.append(f"{n_ok}/{len(results)} checks passed")
    return "\n".join(lines)
