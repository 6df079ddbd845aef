"""Squared-error loss, momentum SGD and the patch-sampling training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ShapeError
from .model import Model, backward, forward

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-7
    batch_size: int = 128
    epochs: int = 100
    patches_per_image: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("momentum and weight_decay must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch norm needs batch statistics)")
        if self.epochs < 1 or self.patches_per_image < 1:
            raise ValueError("epochs and patches_per_image must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SgdState:
    velocity: dict

    @classmethod
    def zeros_like(cls, params: dict) -> "SgdState":
        return cls({k: np.zeros_like(v) for k, v in params.items()})


def l2_loss(pred, target):
    """Mean squared error over the batch and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape or pred.ndim != 1:
        raise ShapeError(f"l2_loss needs equal-length vectors, got {pred.shape} and {target.shape}")
    diff = pred - target
    n = diff.shape[0]
    return float(np.mean(diff.astype(np.float64) ** 2)), (2.0 / n) * diff


def decays(name: str) -> bool:
    """Weight decay applies to conv/linear weights only, never to biases or BN affine terms."""
    return not name.endswith((".bias", ".gamma", ".beta"))


def sgd_step(params: dict, grads: dict, state: SgdState, cfg: TrainConfig):
    """In-place momentum update: ``v = m*v + g + wd*w``, ``w -= lr*v``."""
    for name, w in params.items():
        g = grads[name]
        v = state.velocity[name]
        if g.shape != w.shape or v.shape != w.shape:
            raise ShapeError(f"{name}: grad {g.shape} / velocity {v.shape} vs parameter {w.shape}")
        if cfg.weight_decay and decays(name):
            g = g + cfg.weight_decay * w
        v *= cfg.momentum
        v += g
        w -= cfg.learning_rate * v
    return params, state


def _usable(samples, patch):
    keep = [s for s in samples if min(s.distorted.shape) >= patch]
    if len(keep) < len(samples):
        log.warning("skipping %d images smaller than %dpx", len(samples) - len(keep), patch)
    if not keep:
        raise ValueError(f"no training image is at least {patch}x{patch}")
    return keep


def train(model: Model, train_set, cfg: TrainConfig, on_epoch=None):
    """Train in place.  Returns ``(model, loss_log)`` with ``(epoch, step, loss)`` rows.

    ``train_set`` is a sequence of loaded samples (see ``data.load_samples``).
    Each epoch draws ``patches_per_image`` aligned random crops per image,
    shuffles them and walks mini-batches; a trailing batch of one patch is
    dropped because batch norm cannot normalise it.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    p = model.config.patch_size
    samples = _usable(list(train_set), p)
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    state = SgdState.zeros_like(params)
    dtype = model.dtype
    loss_log = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        jobs = []
        for i, s in enumerate(samples):
            h, w = s.distorted.shape
            ys = rng.integers(0, h - p + 1, size=cfg.patches_per_image)
            xs = rng.integers(0, w - p + 1, size=cfg.patches_per_image)
            jobs.extend((i, int(y), int(x)) for y, x in zip(ys, xs))
        order = rng.permutation(len(jobs))
        n_batches = math.ceil(len(jobs) / cfg.batch_size)
        epoch_losses = []
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            if len(idx) < 2:
                continue
            batch = [jobs[k] for k in idx]
            d = np.stack([samples[i].distorted[y:y + p, x:x + p] for i, y, x in batch])
            r = np.stack([samples[i].residual[y:y + p, x:x + p] for i, y, x in batch])
            target = np.array([samples[i].score for i, _, _ in batch], dtype=dtype)
            scores, cache = forward(model, d[:, None].astype(dtype), r[:, None].astype(dtype),
                                    mode="train")
            loss, grad = l2_loss(scores, target)
            if not math.isfinite(loss):
                raise FloatingPointError(f"loss became {loss} at epoch {epoch}, step {step + 1}")
            grads = backward(model, cache, grad)
            sgd_step(params, grads, state, cfg)
            model.touch()
            step += 1
            loss_log.append((epoch, step, loss))
            epoch_losses.append(loss)
        log.info("epoch %d/%d mean loss %.5f", epoch, cfg.epochs, float(np.mean(epoch_losses)))
        if on_epoch is not None:
            on_epoch(epoch, float(np.mean(epoch_losses)))
    return model, loss_log


def write_loss_log(loss_log, path):
    with open(path, "w") as fh:
        fh.write("epoch,step,loss\n")
        for epoch, step, loss in loss_log:
            fh.write(f"{epoch},{step},{loss!r}\n")


def read_loss_log(path):
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "epoch,step,loss":
            raise ValueError(f"{path}: unexpected loss log header {header!r}")
        for line in fh:
            e, s, v = line.strip().split(",")
            rows.append((int(e), int(s), float(v)))
    return rows
