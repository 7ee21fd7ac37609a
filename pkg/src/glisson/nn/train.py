"""Mini-batch training with Adam and validation early stopping."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from ..imaging import ParameterError
from .model import ModelSpec, Network

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""

    def __init__(self, epoch: int, learning_rate: float):
        super().__init__(f"loss became non-finite at epoch {epoch} (learning rate {learning_rate})")
        self.epoch = epoch
        self.learning_rate = learning_rate


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 20
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "max_epochs", "patience"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        if self.patience > self.max_epochs:
            raise ParameterError(f"patience ({self.patience}) exceeds max_epochs ({self.max_epochs})")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelState:
    spec: ModelSpec
    net: Network
    history: list = field(default_factory=list)
    best_epoch: int = 0

    def forward(self, inputs):
        return self.net.forward(inputs)


class Adam:
    def __init__(self, net: Network, cfg: TrainConfig):
        self.net, self.cfg = net, cfg
        self.t = 0
        self.m = [np.zeros_like(l.params[n]) for l, n in net.parameters()]
        self.v = [np.zeros_like(l.params[n]) for l, n in net.parameters()]

    def step(self):
        cfg = self.cfg
        self.t += 1
        b1, b2 = cfg.beta1, cfg.beta2
        lr_t = cfg.learning_rate * np.sqrt(1 - b2 ** self.t) / (1 - b1 ** self.t)
        for (layer, name), m, v in zip(self.net.parameters(), self.m, self.v):
            g = layer.grads[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            layer.params[name] -= (lr_t * m / (np.sqrt(v) + cfg.epsilon)).astype(layer.params[name].dtype)


def _take(inputs, idx):
    return [x[idx] for x in inputs]


def _accuracy(net, inputs, labels, batch=256):
    n = len(labels)
    correct = 0
    for s in range(0, n, batch):
        correct += int((net.predict(_take(inputs, slice(s, s + batch))) == labels[s:s + batch]).sum())
    return correct / n


def _eval_loss(net, inputs, labels, batch=256):
    n = len(labels)
    total = 0.0
    for s in range(0, n, batch):
        sl = slice(s, s + batch)
        total += net.loss(_take(inputs, sl), labels[sl]) * len(labels[sl])
    return total / n


def train(spec: ModelSpec, train_inputs, train_labels, val_inputs=None, val_labels=None,
          config: TrainConfig | None = None, dtype=np.float32) -> ModelState:
    """Train a freshly initialised network for ``spec``.

    ``*_inputs`` are lists with one array per model input.  Without a
    validation set, the training loss drives early stopping instead.
    """
    cfg = config or TrainConfig()
    train_labels = np.asarray(train_labels, dtype=np.int64)
    if len(train_labels) == 0:
        raise ParameterError("training set is empty")
    if train_labels.max() >= spec.class_count or train_labels.min() < 0:
        raise ParameterError(f"labels must lie in [0, {spec.class_count})")
    train_inputs = [np.asarray(x, dtype=dtype) for x in train_inputs]
    has_val = val_inputs is not None and val_labels is not None and len(val_labels) > 0
    if has_val:
        val_inputs = [np.asarray(x, dtype=dtype) for x in val_inputs]
        val_labels = np.asarray(val_labels, dtype=np.int64)

    rng = np.random.default_rng(cfg.seed)
    net = Network(spec, seed=int(rng.integers(2 ** 63)), dtype=dtype)
    opt = Adam(net, cfg)
    n = len(train_labels)
    best_loss, best_weights, best_epoch, waited = np.inf, net.get_weights(), 0, 0
    history = []
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        total, correct = 0.0, 0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            batch_loss, hits = net.loss_and_grad(_take(train_inputs, idx), train_labels[idx],
                                                 training=True, return_correct=True)
            if not np.isfinite(batch_loss):
                raise TrainingError(epoch, cfg.learning_rate)
            opt.step()
            total += batch_loss * len(idx)
            correct += hits
        # running figures over the epoch's batches (dropout active), as usual
        record = {"epoch": epoch, "train_loss": total / n, "train_acc": correct / n}
        if has_val:
            record["val_loss"] = _eval_loss(net, val_inputs, val_labels)
            record["val_acc"] = _accuracy(net, val_inputs, val_labels)
        monitor = record["val_loss"] if has_val else record["train_loss"]
        if not np.isfinite(monitor):
            raise TrainingError(epoch, cfg.learning_rate)
        history.append(record)
        if monitor < best_loss:
            best_loss, best_weights, best_epoch, waited = monitor, net.get_weights(), epoch, 0
        else:
            waited += 1
            if waited >= cfg.patience:
                log.debug("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
    net.set_weights(best_weights)
    return ModelState(spec=spec, net=net, history=history, best_epoch=best_epoch)


def predict(state: ModelState, inputs) -> np.ndarray:
    """Argmax class per element; ties go to the smaller class index."""
    return state.net.predict(inputs)
