"""Sum-of-squares loss, Adam with step decay, and the mini-batch training loop."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor, backward
from .data import WindowSample
from .model import SceneWindow, TrajNet

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    decay: float = 0.5
    decay_period: int = 20
    batch: int = 64
    epochs: int = 100
    seed: int = 1
    clip_norm: float = 0.0  # global-norm clipping, 0 disables

    def __post_init__(self):
        if self.lr0 < 0:
            raise ValueError(f"lr0 must be non-negative, got {self.lr0}")
        if not 0 < self.decay <= 1:
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")
        if self.batch < 1 or self.decay_period < 1 or self.epochs < 0:
            raise ValueError("batch and decay_period must be >= 1, epochs >= 0")


def l2_loss(pred, truth) -> Tensor:
    """Plain sum of squared coordinate errors over fighters, steps and axes."""
    pred, truth = as_tensor(pred), as_tensor(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"l2_loss: prediction {pred.shape} vs truth {truth.shape}")
    d = pred - truth
    return (d * d).sum()


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    return cfg.lr0 * cfg.decay ** (epoch // cfg.decay_period)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float) -> AdamState:
    """One bias-corrected Adam update, applied in place to ``params``."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


@dataclass
class LossRecord:
    mean_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.mean_loss)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "mean_loss", "lr", "seconds"])
        for k, (loss, lr, sec) in enumerate(zip(self.mean_loss, self.lr, self.seconds), start=1):
            w.writerow([k, repr(loss), repr(lr), f"{sec:.6f}"])
        return buf.getvalue()

    def trace_csv(self) -> str:
        """Loss and learning rate only; bitwise-stable across identical runs."""
        return "\n".join(f"{k},{loss!r},{lr!r}" for k, (loss, lr) in
                         enumerate(zip(self.mean_loss, self.lr), start=1))


def batch_arrays(samples: list[WindowSample]) -> tuple[SceneWindow, np.ndarray]:
    scene = SceneWindow.batch([s.input for s in samples], [s.scale for s in samples])
    target = np.concatenate([s.target for s in samples])
    return scene, target


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm:
        for g in grads.values():
            g *= max_norm / total


def fit(model: TrajNet, samples: list[WindowSample], cfg: TrainConfig,
        state: AdamState | None = None) -> tuple[TrajNet, LossRecord]:
    """Train ``model`` in place; one batch element is a whole multi-fighter window."""
    if not samples:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(cfg.seed)
    state = state or AdamState()
    record = LossRecord()
    names = list(model.params)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, cfg)
        order = rng.permutation(len(samples))
        total = 0.0
        for start in range(0, len(order), cfg.batch):
            chunk = [samples[i] for i in order[start:start + cfg.batch]]
            scene, target = batch_arrays(chunk)
            model.zero_grad()
            pred = model.rollout(Tensor(scene.positions), scene)
            loss = l2_loss(pred, target)
            backward(loss)
            grads = {k: model.params[k].grad for k in names}
            if cfg.clip_norm > 0:
                _clip(grads, cfg.clip_norm)
            adam_step(model.params, grads, state, lr)
            total += float(loss.data)
        record.mean_loss.append(total / len(samples))
        record.lr.append(lr)
        record.seconds.append(time.perf_counter() - t0)
        log.debug("epoch %d loss %.6g lr %.3g", epoch + 1, record.mean_loss[-1], lr)
    model.zero_grad()
    return model, record
