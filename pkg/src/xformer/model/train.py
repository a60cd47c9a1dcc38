"""Synthetic two-class data and a plain gradient-descent training loop."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..core import ops
from ..core.module import Module
from ..core.tensor import GradTape, NonFiniteError, Tensor, no_grad

DEFAULT_LR = 0.1
DEFAULT_STEPS = 200
TRAIN_SAMPLES = 64
HELDOUT_SAMPLES = 100

# class 0 blobs are reddish, class 1 blobs bluish
_COLORS = np.array([[0.9, 0.25, 0.15], [0.15, 0.25, 0.9]])


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class Dataset:
    images: np.ndarray  # (B, 3, H, W) in [0, 1]
    labels: np.ndarray  # (B,) int64

    def __len__(self) -> int:
        return len(self.labels)


def synthetic_blobs(n: int, resolution: int = 64, seed: int = 0, dtype=np.float32) -> Dataset:
    """``n`` images of one soft colored disc on a noisy gray background.

    Disc position and radius are random; the disc color (red versus blue,
    jittered) determines the label. Labels alternate so both classes are
    balanced. Fully determined by ``seed``.
    """
    rng = np.random.default_rng(seed)
    labels = np.arange(n, dtype=np.int64) % 2
    yy, xx = np.mgrid[0:resolution, 0:resolution].astype(np.float64)
    images = np.empty((n, 3, resolution, resolution))
    for i, y in enumerate(labels):
        r = rng.uniform(0.12, 0.25) * resolution
        cy, cx = rng.uniform(r, resolution - r, size=2)
        mask = 1.0 / (1.0 + np.exp((np.hypot(yy - cy, xx - cx) - r) / 1.5))
        color = np.clip(_COLORS[y] + rng.normal(0.0, 0.08, 3), 0.0, 1.0)
        background = rng.uniform(0.3, 0.6)
        img = background * (1 - mask) + color[:, None, None] * mask
        images[i] = np.clip(img + rng.normal(0.0, 0.05, img.shape), 0.0, 1.0)
    return Dataset(images.astype(dtype), labels)


def toy_datasets(seed: int = 0, samples: int = TRAIN_SAMPLES, heldout: int = HELDOUT_SAMPLES,
                 resolution: int = 64) -> tuple[Dataset, Dataset]:
    """Training and held-out sets drawn from independent streams derived from ``seed``."""
    train_ss, held_ss = np.random.SeedSequence(seed).spawn(2)
    return (synthetic_blobs(samples, resolution, int(train_ss.generate_state(1)[0])),
            synthetic_blobs(heldout, resolution, int(held_ss.generate_state(1)[0])))


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)

    @property
    def initial(self) -> float:
        return self.losses[0]

    @property
    def final(self) -> float:
        return self.losses[-1]


def _loss(model: Module, data: Dataset) -> Tensor:
    x = Tensor(data.images, dtype=model.parameters()[0].dtype)
    return ops.cross_entropy(model(x), data.labels)


def _checked(loss: Tensor, step: int) -> float:
    value = loss.item()
    if not np.isfinite(value):
        raise DivergenceError(f"loss became non-finite at step {step}")
    return value


def toy_train(model: Module, dataset: Dataset, steps: int = DEFAULT_STEPS, lr: float = DEFAULT_LR,
              callback: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Full-batch gradient descent with cross-entropy.

    ``losses[t]`` is the training loss after ``t`` updates, so the curve has
    ``steps + 1`` entries and ``losses[-1]`` belongs to the returned weights.
    Running normalization statistics are updated once per update step.
    The model is left in training mode. There is no sampling, so the run is
    a deterministic function of the initial weights and the data.

    Raises:
        DivergenceError: if the loss stops being finite.
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    model.train()
    params = model.parameters()
    result = TrainResult()
    for step in range(steps):
        model.zero_grad()
        try:
            with GradTape() as tape:
                loss = _loss(model, dataset)
        except NonFiniteError as exc:
            raise DivergenceError(f"non-finite activations at step {step}: {exc}") from exc
        result.losses.append(_checked(loss, step))
        if callback:
            callback(step, result.losses[-1])
        tape.backward(loss)
        for p in params:
            if p.grad is not None:
                p.data = p.data - np.asarray(lr, dtype=p.dtype) * p.grad
    # final loss uses batch statistics like every other entry, without touching running stats
    saved = _buffers(model)
    try:
        with no_grad():
            result.losses.append(_checked(_loss(model, dataset), steps))
    except NonFiniteError as exc:
        raise DivergenceError(f"non-finite activations after {steps} steps: {exc}") from exc
    finally:
        _restore(model, saved)
    return result


def _buffers(model: Module) -> list:
    return [(mod, name, getattr(mod, name)) for _, mod in model.named_modules() for name in mod._buffer_names]


def _restore(model: Module, saved: list) -> None:
    for mod, name, value in saved:
        setattr(mod, name, value)


def predict(model: Module, images: np.ndarray) -> np.ndarray:
    """Class indices in eval mode (running normalization statistics)."""
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            logits = model(Tensor(images, dtype=model.parameters()[0].dtype)).data
    finally:
        model.train(was_training)
    return logits.argmax(axis=-1)


def accuracy(model: Module, data: Dataset) -> float:
    return float(np.mean(predict(model, data.images) == data.labels))
