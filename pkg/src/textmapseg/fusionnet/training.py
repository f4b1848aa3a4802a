"""Adam training with dev-set model selection, and prediction."""
from __future__ import annotations

import logging
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..errors import DataError, NumericError
from .model import PixelModel, loss_and_grads, loss_only
from .transforms import Modality, Sample, augment, sample_input

logger = logging.getLogger(__name__)

REFERENCE_STEPS = 17_000  # full-scale schedule length, recorded in model metadata


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    learning_rate: float = 1e-4
    lr_decay: float = 0.95  # per epoch-equivalent
    weight_decay: float = 1e-6
    dev_fraction: float = 0.10
    scale_range: tuple[float, float] = (0.8, 1.2)
    rotation_range: tuple[float, float] = (-0.01, 0.01)
    augment: bool = True
    pixel_budget: int = 500_000
    hidden: tuple[int, ...] = (16, 16)
    dilations: tuple[int, ...] = ()  # one per layer incl. the output layer; empty = all 1
    eval_every: int = 50
    seed: int = 0
    prefetch: bool = False
    reference_steps: int = REFERENCE_STEPS

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"unknown training option(s): {', '.join(sorted(unknown))}")
        for key in ("scale_range", "rotation_range", "hidden", "dilations"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainLog:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    dev: dict[int, float] = field(default_factory=dict)
    best_step: int = 0
    best_dev_loss: float = math.inf

    def lines(self) -> list[str]:
        out = []
        for s, l in zip(self.steps, self.losses):
            d = self.dev.get(s)
            out.append(f"{s} {l!r}" + (f" {d!r}" if d is not None else ""))
        return out

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write("# step loss dev_loss?\n")
            for line in self.lines():
                f.write(line + "\n")


class Adam:
    def __init__(self, params: Sequence[np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params: list[np.ndarray], grads: Sequence[np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def split_dev(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic shuffle; returns (train indices, dev indices)."""
    n_dev = int(math.floor(n * fraction + 0.5))
    if n_dev == 0:
        raise DataError(f"dev split of {fraction:.0%} over {n} pages is empty")
    if n_dev >= n:
        raise DataError("dev split leaves no training pages")
    perm = np.random.default_rng([seed, 0xDE5]).permutation(n)
    return np.sort(perm[n_dev:]), np.sort(perm[:n_dev])


def _stack_groups(arrays: Sequence[np.ndarray]) -> list[list[int]]:
    groups: dict = {}
    for i, a in enumerate(arrays):
        groups.setdefault(a.shape, []).append(i)
    return list(groups.values())


def _batch_loss_and_grads(model, xs, masks, weight_decay):
    """Pixel-weighted loss/grads over samples that may differ in size."""
    total_px = sum(m.size for m in masks)
    loss = 0.0
    grads = None
    for idx in _stack_groups(xs):
        x = np.stack([xs[i] for i in idx])
        y = np.stack([masks[i] for i in idx])
        w = y.size / total_px
        l, g = loss_and_grads(model, x, y, 0.0)
        loss += w * l
        g = [w * gi for gi in g] if w != 1.0 else g
        grads = g if grads is None else [a + b for a, b in zip(grads, g)]
    for i, wt in enumerate(model.weights):
        loss += 0.5 * weight_decay * float(np.sum(wt.astype(np.float64) ** 2))
        grads[2 * i] = grads[2 * i] + weight_decay * wt
    return loss, grads


def dev_loss(model: PixelModel, xs: Sequence[np.ndarray], masks: Sequence[np.ndarray]) -> float:
    total_px = sum(m.size for m in masks)
    out = 0.0
    for idx in _stack_groups(xs):
        x = np.stack([xs[i] for i in idx])
        y = np.stack([masks[i] for i in idx])
        out += loss_only(model, x, y) * y.size / total_px
    return out


def _prepare_batch(samples, indices, step, modality, config, dtype):
    rng = np.random.default_rng([config.seed, step, 0xA06])
    xs, ys = [], []
    for i in indices:
        s = samples[i]
        if config.augment:
            s = augment(s, rng, config.scale_range, config.rotation_range)
        xs.append(sample_input(s, modality).astype(dtype))
        ys.append(s.mask)
    return xs, ys


def train(
    samples: Sequence[Sample],
    modality,
    n_classes: int,
    config: Optional[TrainConfig] = None,
    dtype=np.float32,
) -> tuple[PixelModel, TrainLog]:
    """Fit a :class:`PixelModel`; returns the snapshot with the lowest dev loss."""
    config = config or TrainConfig()
    modality = Modality.parse(modality)
    if not samples:
        raise DataError("training set is empty")
    if n_classes < 1:
        raise DataError("need at least one foreground class")
    if any(s.mask is None for s in samples):
        raise DataError("every training sample needs a label mask")
    train_idx, dev_idx = split_dev(len(samples), config.dev_fraction, config.seed)

    n_in = sample_input(samples[0], modality).shape[-1]
    n_img = int(samples[0].image.shape[2])
    model = PixelModel.initialize(
        n_in, tuple(config.hidden) + (n_classes,), np.random.default_rng([config.seed, 0x1A1]), dtype=dtype,
        dilations=config.dilations,
        modality=modality.value, image_channels=n_img, text_channels=n_in - n_img if modality.uses_text else 0,
    )
    dev_x = [sample_input(samples[i], modality).astype(dtype) for i in dev_idx]
    dev_y = [samples[i].mask for i in dev_idx]

    order_rng = np.random.default_rng([config.seed, 0xBA7])
    batches = [order_rng.choice(train_idx, size=config.batch_size, replace=len(train_idx) < config.batch_size)
               for _ in range(config.steps)]
    steps_per_epoch = max(1, math.ceil(len(train_idx) / config.batch_size))

    opt = Adam(model.params)
    log = TrainLog()
    best = model.copy()

    def consider(step):
        d = dev_loss(model, dev_x, dev_y)
        if not math.isfinite(d):
            raise NumericError(f"dev loss became {d} at step {step}")
        log.dev[step] = d
        if d < log.best_dev_loss:
            log.best_dev_loss, log.best_step = d, step
            best.set_params(model.params)

    def batch_iter():
        if not config.prefetch:
            for step, idx in enumerate(batches, start=1):
                yield _prepare_batch(samples, idx, step, modality, config, dtype)
            return
        # prefetch only: batches are still consumed strictly in step order
        with ThreadPoolExecutor(max_workers=2) as pool:
            pending = deque()
            for step, idx in enumerate(batches, start=1):
                pending.append(pool.submit(_prepare_batch, samples, idx, step, modality, config, dtype))
                if len(pending) > 4:
                    yield pending.popleft().result()
            while pending:
                yield pending.popleft().result()

    consider(0)
    for step, (xs, ys) in enumerate(batch_iter(), start=1):
        loss, grads = _batch_loss_and_grads(model, xs, ys, config.weight_decay)
        if not math.isfinite(loss):
            raise NumericError(f"training loss became {loss} at step {step} (lr={config.learning_rate})")
        lr = config.learning_rate * config.lr_decay ** (step / steps_per_epoch)
        opt.step(model.params, grads, lr)
        log.steps.append(step)
        log.losses.append(loss)
        if step % config.eval_every == 0 or step == config.steps:
            consider(step)
    best.meta.update(best_step=log.best_step, steps=config.steps, reference_steps=config.reference_steps)
    return best, log


def predict(model: PixelModel, fused_input: np.ndarray) -> np.ndarray:
    """H×W×K sigmoid probabilities."""
    return model.predict_proba(np.asarray(fused_input, dtype=model.weights[0].dtype))
