"""Adam training loop and finite-difference gradient check."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .._rng import substream
from .dataset import WindowDataset
from .model import ClassifierArch, MlpArch, Network, ReLU

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 20
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_epsilon: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs <= 0 or self.adam_epsilon <= 0:
            raise ValueError("learning_rate, batch_size, epochs and adam_epsilon must be positive")
        b1, b2 = self.adam_betas
        if not (0 < b1 < 1 and 0 < b2 < 1):
            raise ValueError(f"adam betas must lie in (0, 1), got {self.adam_betas}")


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


@dataclass
class TrainResult:
    net: Network
    loss_history: list[float] = field(default_factory=list)


def train(arch: ClassifierArch | MlpArch, data: WindowDataset, tc: TrainConfig) -> TrainResult:
    """Mini-batch Adam on mean cross-entropy; returns the per-epoch mean loss.

    Weight init draws from the ``init`` substream of ``tc.seed`` and batch
    order from the ``shuffle`` substream, so a fixed seed reproduces the
    final weights bit for bit.
    """
    if len(data) == 0:
        raise ValueError("training data is empty")
    if (data.n_ant, data.n_cs) != (arch.n_ant, arch.n_cs) or data.k_max != arch.k_max:
        raise ValueError(
            f"dataset (n_ant={data.n_ant}, n_cs={data.n_cs}, K={data.k_max}) does not match "
            f"architecture (n_ant={arch.n_ant}, n_cs={arch.n_cs}, K={arch.k_max})"
        )
    net = Network(arch).init_weights(substream(tc.seed, "init"))
    shuffle = substream(tc.seed, "shuffle")
    opt = Adam(net.params, tc.learning_rate, tc.adam_betas, tc.adam_epsilon)
    history = []
    n = len(data)
    for epoch in range(tc.epochs):
        order = shuffle.permutation(n)
        total = 0.0
        for start in range(0, n, tc.batch_size):
            idx = order[start : start + tc.batch_size]
            loss = net.loss_and_grad(data.x[idx], data.labels[idx])
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss} at epoch {epoch + 1}, batch starting at {start}; "
                    f"check input scaling or lower the learning rate ({tc.learning_rate})"
                )
            opt.step(net.grads)
            total += loss * len(idx)
        history.append(total / n)
        log.info("epoch %d/%d loss %.5f", epoch + 1, tc.epochs, history[-1])
    return TrainResult(net, history)


def _relu_pattern(net: Network) -> np.ndarray:
    return np.concatenate([layer._mask.ravel() for layer in net.layers if isinstance(layer, ReLU)] or [np.zeros(0, bool)])


def grad_check(
    net: Network,
    x: np.ndarray,
    labels: np.ndarray,
    n_params: int = 50,
    step: float = 1e-4,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backprop and central differences.

    Runs in float64 on a copy of ``net``. The relative error of a pair is
    ``|a - n| / max(|a| + |n|, 1e-8)`` so parameters with zero gradient
    (dead ReLU paths) compare as 0 when both sides vanish. A probe whose
    +-step perturbation flips any ReLU is discarded and another parameter
    drawn: the loss is not differentiable across the kink, so the central
    difference there does not estimate the gradient.
    """
    rng = rng or np.random.default_rng(0)
    probe = net.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    probe.loss_and_grad(x, labels)
    pattern = _relu_pattern(probe)
    analytic = np.concatenate([g.ravel() for g in probe.grads])
    flat = probe.flat_params()
    order = rng.permutation(flat.size)
    checked = 0
    worst = 0.0
    for i in order:
        if checked >= n_params:
            break
        orig = flat[i]
        flat[i] = orig + step
        probe.set_flat_params(flat)
        up = probe.loss_and_grad(x, labels)
        kink = not np.array_equal(_relu_pattern(probe), pattern)
        flat[i] = orig - step
        probe.set_flat_params(flat)
        down = probe.loss_and_grad(x, labels)
        kink = kink or not np.array_equal(_relu_pattern(probe), pattern)
        flat[i] = orig
        if kink:
            continue
        numeric = (up - down) / (2 * step)
        err = abs(analytic[i] - numeric) / max(abs(analytic[i]) + abs(numeric), 1e-8)
        worst = max(worst, err)
        checked += 1
    probe.set_flat_params(flat)
    if checked < min(n_params, flat.size):
        raise TrainingError(f"only {checked} kink-free parameters available, wanted {n_params}")
    return worst
