"""SGD training and the synthetic shapes dataset."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np

from .network import Network, batch_loss_and_grads
from .tensor import DTYPE, as_tensor, check_finite

log = logging.getLogger(__name__)

CLASS_NAMES = ("square", "disk", "cross")
# object extent as a fraction of the image side, per class; keeps every
# mask between ~4% and ~20% of the image
SIZE_RANGE = ((0.25, 0.45), (0.27, 0.47), (0.3, 0.5))


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class LabeledSample:
    image: np.ndarray
    label: int
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.mask is not None:
            if self.mask.shape != self.image.shape[-2:]:
                raise ValueError(f"mask {self.mask.shape} does not match image {self.image.shape}")
            if not np.all((self.mask == 0) | (self.mask == 1)):
                raise ValueError("mask must be {0,1}-valued")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 20
    batch_size: int = 16
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


def sgd_step(params, grads, learning_rate):
    """theta' = theta - lr * grad, elementwise; returns new arrays."""
    if not learning_rate > 0:
        raise ValueError("learning_rate must be positive")
    params, grads = list(params), list(grads)
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    out = []
    for p, g in zip(params, grads):
        p = np.asarray(p, dtype=DTYPE)
        g = np.asarray(g, dtype=DTYPE)
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not mirror parameter {p.shape}")
        check_finite(g, "gradient")
        out.append((p.astype(np.float64) - learning_rate * g.astype(np.float64)).astype(DTYPE))
    return out


def history_digest(history) -> str:
    h = hashlib.sha256()
    for key in ("loss", "accuracy"):
        h.update(np.asarray(history[key], dtype="<f8").tobytes())
    return h.hexdigest()


def train(net: Network, dataset, config: TrainConfig):
    """Mini-batch SGD on softmax cross-entropy.

    Returns ``(trained_net, history)`` with ``history["loss"]`` and
    ``history["accuracy"]`` holding one entry per epoch. Single-threaded
    and fully determined by the initial weights and ``config.seed``.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    history = {"loss": [], "accuracy": []}
    if config.epochs == 0:
        return net, history
    xs = np.stack([as_tensor(s.image, name="image") for s in dataset])
    ys = np.array([s.label for s in dataset], dtype=np.intp)
    if ys.min() < 0 or ys.max() >= net.num_classes:
        raise ValueError("label out of range for the network")

    rng = np.random.default_rng(config.seed)
    params = net.params
    n = len(dataset)
    for epoch in range(config.epochs):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        total_loss, correct = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, ok, grads = batch_loss_and_grads(net, xs[idx], ys[idx])
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise TrainingDivergedError(
                    f"non-finite loss/gradient at epoch {epoch}, batch starting {start} "
                    f"(lr={config.learning_rate}); try a smaller learning rate"
                )
            total_loss += loss * len(idx)
            correct += ok
            params = sgd_step(params, grads, config.learning_rate)
            net = net.with_params(params)
        history["loss"].append(total_loss / n)
        history["accuracy"].append(correct / n)
        log.info("epoch %d loss %.4f acc %.4f", epoch + 1, history["loss"][-1], history["accuracy"][-1])

    meta = dict(net.metadata)
    meta.update(
        seed=int(config.seed),
        learning_rate=float(config.learning_rate),
        epochs=int(config.epochs),
        batch_size=int(config.batch_size),
        history_digest=history_digest(history),
    )
    return net.with_params(params, metadata=meta), history


def accuracy(net: Network, samples) -> float:
    from .network import forward_batch

    xs = np.stack([s.image for s in samples])
    ys = np.array([s.label for s in samples])
    return float(np.mean(np.argmax(forward_batch(net, xs), axis=1) == ys))


def _shape_mask(kind, size, cy, cx, image_size):
    c = np.arange(image_size) + 0.5
    dy = np.abs(c[:, None] - cy)
    dx = np.abs(c[None, :] - cx)
    half = size / 2
    if kind == 0:
        m = (dy <= half) & (dx <= half)
    elif kind == 1:
        m = dy ** 2 + dx ** 2 <= half ** 2
    else:
        arm = max(size / 3, 3.0) / 2
        m = ((dy <= arm) & (dx <= half)) | ((dx <= arm) & (dy <= half))
    return m


def generate_shapes_dataset(seed: int, n_per_class: int, image_size: int = 32):
    """Noisy grayscale images of a filled square (0), disk (1), or plus
    cross (2) at random position and scale, with exact object masks.

    Classes are interleaved so every prefix of length 3k is balanced.
    Pixel values are multiples of 1/255 so they survive a PGM round trip.
    """
    if image_size < 16:
        raise ValueError(f"image_size {image_size} is too small to fit a shape (need >= 16)")
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    S = image_size
    out = []
    for i in range(3 * n_per_class):
        label = i % 3
        size = rng.uniform(*SIZE_RANGE[label]) * S
        cy, cx = rng.uniform(size / 2, S - size / 2, size=2)
        mask = _shape_mask(label, size, cy, cx, S)
        background = rng.uniform(0.05, 0.35)
        fg = rng.uniform(0.65, 1.0)
        img = np.where(mask, fg, background) + rng.normal(0.0, 0.08, size=(S, S))
        img = np.round(np.clip(img, 0.0, 1.0) * 255) / 255
        out.append(LabeledSample(img.astype(DTYPE)[None], label, mask.astype(DTYPE)))
    return out


def dataset_mean(samples) -> np.ndarray:
    """Per-channel mean pixel value, shape ``[C]``."""
    xs = np.stack([s.image for s in samples]).astype(np.float64)
    return xs.mean(axis=(0, 2, 3)).astype(DTYPE)
