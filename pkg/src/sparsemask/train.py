"""Search, retraining and evaluation loops."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import metrics as M
from .autodiff.optim import SGD, ParamGroup
from .autodiff.tensor import Tensor, no_grad
from .config import RunConfig, SearchSection, TrainSection
from .objective import SparseLossConfig, task_loss, total_loss
from .pruner import PrunedArchitecture, instantiate, prune
from .searchspace import FDN, DenseNet, GateMatrix, build_fdn, read_gates
from .tasks import augment, load_split

log = logging.getLogger(__name__)


@dataclass
class Data:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray


def load_data(cfg: RunConfig, cache_dir: str | Path | None = None, workers: int = 1) -> Data:
    tx, ty = load_split(cfg.task, "train", cache_dir, workers)
    vx, vy = load_split(cfg.task, "val", cache_dir, workers)
    return Data(tx, ty, vx, vy)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Sample order for one epoch; a pure function of ``(seed, epoch)`` so runs can resume."""
    return np.random.default_rng([seed, epoch, 17]).permutation(n)


def batches(order: np.ndarray, batch: int):
    # the ragged tail is dropped: batch statistics need a full batch
    for start in range(0, len(order) - batch + 1, batch):
        yield order[start:start + batch]


def make_batch(cfg: RunConfig, x: np.ndarray, y: np.ndarray, idx: np.ndarray, seed: int,
               epoch: int, step: int):
    rng = np.random.default_rng([seed, epoch, step, 29])
    imgs, labs = [], []
    for i in idx:
        im, lb = augment(x[i], y[i], rng, flip=cfg.flip, scale_range=cfg.scale_jitter)
        imgs.append(im)
        labs.append(lb)
    return Tensor(np.stack(imgs)), np.stack(labs)


def param_groups(net: DenseNet, sec, lr_scale_gates: float = 1.0) -> list[ParamGroup]:
    gate_ids = {id(p) for p in net.gate_parameters()} if isinstance(net, FDN) else set()
    enc = net.encoder.parameters()
    dec = [p for p in net.decoder.parameters() + net.head.parameters() if id(p) not in gate_ids]
    groups = [
        ParamGroup(enc, sec.lr_encoder * sec.lr_scale, sec.weight_decay, "encoder"),
        ParamGroup(dec, sec.lr_decoder * sec.lr_scale, sec.weight_decay, "decoder"),
    ]
    if gate_ids:
        # gates are decoder parameters but carry no weight decay: decay would pull every gate to 0.5
        groups.append(ParamGroup(net.gate_parameters(), sec.lr_decoder * sec.lr_scale * lr_scale_gates,
                                 0.0, "gates"))
    return groups


def predict(net: DenseNet, x: np.ndarray, batch: int = 25) -> np.ndarray:
    """Class probabilities ``(N, K, H, W)`` in eval mode."""
    outs = []
    with no_grad():
        for s in range(0, len(x), batch):
            logits = net(Tensor(x[s:s + batch]), training=False).data
            z = logits - logits.max(axis=1, keepdims=True)
            e = np.exp(z)
            outs.append(e / e.sum(axis=1, keepdims=True))
    return np.concatenate(outs)


def evaluate(net: DenseNet, x: np.ndarray, y: np.ndarray, cfg: RunConfig) -> dict[str, float]:
    prob = predict(net, x)
    pred = prob.argmax(axis=1)
    k = cfg.task.num_classes
    out = {"miou": M.miou(pred, y, k), "pixacc": M.pixel_acc(pred, y)}
    if k == 2:
        out["mae"] = M.mae(prob[:, 1], y)
        out["fbeta"] = M.f_beta(prob[:, 1], y)
    return out


@dataclass
class SearchResult:
    fdn: FDN
    gates: GateMatrix
    arch: PrunedArchitecture | None
    metrics: M.MetricsLog
    seconds: float
    prune_error: str | None = None


def _run_epochs(net: DenseNet, cfg: RunConfig, sec: SearchSection | TrainSection, data: Data,
                opt: SGD, loss_fn: Callable[[Tensor, np.ndarray], Tensor], mlog: M.MetricsLog,
                start_epoch: int = 0, on_epoch: Callable[[int], None] | None = None,
                eval_every: int = 1, after_step: Callable[[], None] | None = None) -> None:
    n = len(data.train_x)
    for epoch in range(start_epoch, sec.epochs):
        order = epoch_order(n, sec.seed, epoch)
        losses = []
        for step, idx in enumerate(batches(order, sec.batch)):
            xb, yb = make_batch(cfg, data.train_x, data.train_y, idx, sec.seed, epoch, step)
            opt.zero_grad()
            logits = net(xb, training=True)
            loss = loss_fn(logits, yb)
            loss.backward()
            opt.step()
            if after_step is not None:
                after_step()
            losses.append(loss.item())
        mlog.add(epoch, "train", "loss", float(np.mean(losses)))
        if eval_every and ((epoch + 1) % eval_every == 0 or epoch + 1 == sec.epochs):
            for name, value in evaluate(net, data.val_x, data.val_y, cfg).items():
                mlog.add(epoch, "val", name, value)
        log.info("epoch %d/%d loss %.4f val mIoU %s", epoch + 1, sec.epochs, np.mean(losses),
                 mlog.last("val", "miou"))
        if on_epoch is not None:
            on_epoch(epoch)


def steps_per_epoch(n: int, batch: int) -> int:
    return n // batch


def search(cfg: RunConfig, data: Data | None = None, eval_every: int = 1) -> SearchResult:
    """Train the gated FDN with task loss plus the gate regularizer, then prune."""
    t0 = time.perf_counter()
    data = data or load_data(cfg)
    sec = cfg.search
    fdn = build_fdn(cfg.encoder, cfg.decoder_channels, sec.seed, num_classes=cfg.task.num_classes,
                    pointwise=cfg.pointwise, activation=cfg.activation, gate_param=cfg.gate_param)
    total = sec.epochs * steps_per_epoch(len(data.train_x), sec.batch)
    opt = SGD(param_groups(fdn, sec, sec.gate_lr_scale), total, sec.momentum, sec.poly_power)
    loss_cfg = SparseLossConfig(lam=sec.lam, regularizer=cfg.regularizer)
    mlog = M.MetricsLog(cfg.digest())

    def loss_fn(logits, labels):
        return total_loss(task_loss(logits, labels), fdn.gate_tensors(), loss_cfg)

    def record_gates(epoch):
        g = read_gates(fdn)
        vals = np.array(list(g.values.values()))
        mlog.add(epoch, "search", "binary_fraction", binary_fraction(vals))
        mlog.add(epoch, "search", "edges_above_sigma", float((vals >= sec.sigma).sum()))

    _run_epochs(fdn, cfg, sec, data, opt, loss_fn, mlog, on_epoch=record_gates, eval_every=eval_every,
                after_step=lambda: fdn.project_gates(loss_cfg.clamp_eps))
    gates = read_gates(fdn)
    meta = {"sigma": sec.sigma, "seed": sec.seed, "config_digest": cfg.digest()}
    arch, err = None, None
    try:
        arch = prune(gates, sec.sigma, cfg.encoder, cfg.decoder_channels, meta)
    except Exception as exc:  # reported to the caller, artifacts still written
        err = str(exc)
    return SearchResult(fdn, gates, arch, mlog, time.perf_counter() - t0, err)


def binary_fraction(values, tol: float = 0.1) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(np.mean((v <= tol) | (v >= 1 - tol)))


def separation_ratio(gates: GateMatrix, sigma: float) -> float:
    """Smallest kept gate over largest dropped gate (``inf`` when nothing was dropped)."""
    vals = np.array(list(gates.values.values()))
    kept, dropped = vals[vals >= sigma], vals[vals < sigma]
    if dropped.size == 0 or kept.size == 0:
        return float("inf")
    return float(kept.min() / max(dropped.max(), 1e-300))


# -- retraining -------------------------------------------------------------
class Trainer:
    """Retrains a fixed architecture with the task loss only; supports checkpoints."""

    def __init__(self, arch: PrunedArchitecture, cfg: RunConfig, data: Data, seed: int | None = None):
        self.arch = arch
        self.cfg = cfg
        self.data = data
        self.sec = cfg.train
        self.seed = self.sec.seed if seed is None else seed
        self.net = instantiate(arch, self.seed, cfg.task.num_classes, activation=cfg.activation,
                               kernel=1 if cfg.pointwise else 3)
        total = self.sec.epochs * steps_per_epoch(len(data.train_x), self.sec.batch)
        self.opt = SGD(param_groups(self.net, self.sec), total, self.sec.momentum, self.sec.poly_power)
        self.metrics = M.MetricsLog(cfg.digest())
        self.epoch = 0

    def loss(self, logits, labels):
        return task_loss(logits, labels)

    def run(self, epochs: int | None = None, eval_every: int = 1) -> M.MetricsLog:
        stop = self.sec.epochs if epochs is None else min(self.sec.epochs, self.epoch + epochs)
        sec = _Limited(self.sec, stop)

        def bump(epoch):
            self.epoch = epoch + 1

        _run_epochs(self.net, self.cfg, sec, self.data, self.opt, self.loss, self.metrics,
                    start_epoch=self.epoch, on_epoch=bump, eval_every=eval_every)
        return self.metrics

    def next_step_loss(self) -> float:
        """Loss of the next scheduled batch under current weights (no update applied)."""
        order = epoch_order(len(self.data.train_x), self.sec.seed, self.epoch)
        idx = next(batches(order, self.sec.batch))
        xb, yb = make_batch(self.cfg, self.data.train_x, self.data.train_y, idx, self.sec.seed, self.epoch, 0)
        snapshot = [b.copy() for _, b in self.net.named_buffers()]
        with no_grad():
            loss = self.loss(self.net(xb, training=True), yb).item()
        for (_, b), s in zip(self.net.named_buffers(), snapshot):
            b[...] = s
        return loss

    def save(self, path: str | Path) -> None:
        state = {f"param/{k}": v for k, v in self.net.state_dict().items()}
        for i, v in enumerate(self.opt.velocity_list()):
            if v is not None:
                state[f"velocity/{i}"] = v
        state["meta/epoch"] = np.array(self.epoch)
        state["meta/step"] = np.array(self.opt.state.step)
        state["meta/digest"] = np.array(self.cfg.digest())
        state["meta/arch"] = np.array(self.arch.to_json())
        np.savez(path, **state)

    def load(self, path: str | Path) -> None:
        with np.load(path, allow_pickle=False) as z:
            params = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
            self.net.load_state_dict(params)
            n = len(self.opt.velocity_list())
            self.opt.load_velocity([z[f"velocity/{i}"] if f"velocity/{i}" in z.files else None
                                    for i in range(n)])
            self.epoch = int(z["meta/epoch"])
            self.opt.state.step = int(z["meta/step"])


@dataclass
class _Limited:
    """A train section view whose epoch count is capped (for partial runs)."""

    base: TrainSection
    epochs: int

    def __getattr__(self, name):
        return getattr(self.base, name)


def retrain(arch: PrunedArchitecture, cfg: RunConfig, data: Data, eval_every: int = 1) -> Trainer:
    trainer = Trainer(arch, cfg, data)
    trainer.run(eval_every=eval_every)
    return trainer
