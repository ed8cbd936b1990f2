"""Minibatch training of the dense classifier (the pretraining stage) and
the append-adversarial-data retraining baseline.

Everything is driven by a single seeded RNG stream: He-style uniform
initialization first, then one permutation per epoch. Two runs with the
same seed produce bit-identical parameters.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .network import (
    DenseLayer,
    LabeledDataset,
    Network,
    _backprop_params,
    _forward_cached,
    _softmax,
    concat_datasets,
    predict_batch,
)

__all__ = ["TrainConfig", "pretrain", "retrain_with_adversarial", "evaluate_accuracy"]


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


def _init_network(layer_dims, rng) -> Network:
    layers = []
    for d_in, d_out in zip(layer_dims, layer_dims[1:]):
        limit = np.sqrt(6.0 / d_in)
        w = rng.uniform(-limit, limit, size=(d_out, d_in))
        layers.append(DenseLayer(w, np.zeros(d_out)))
    return Network(layers)


def _batch_grad(net, X, y):
    acts, pres = _forward_cached(net, X)
    G = _softmax(acts[-1])
    G[np.arange(len(X)), y] -= 1.0
    G /= len(X)
    return _backprop_params(net, acts, pres, G)


def _write_params(net, flat):
    pos = 0
    for layer in net.layers:
        size = layer.weights.size
        layer.weights[...] = flat[pos : pos + size].reshape(layer.weights.shape)
        pos += size
        layer.biases[...] = flat[pos : pos + layer.out_dim]
        pos += layer.out_dim


def _read_params(net):
    return np.concatenate(
        [np.concatenate([l.weights.ravel(), l.biases]) for l in net.layers]
    )


def pretrain(layer_dims, data: LabeledDataset, cfg: TrainConfig) -> Network:
    """Train a freshly initialized network; deterministic given cfg.seed."""
    layer_dims = tuple(int(d) for d in layer_dims)
    if len(layer_dims) < 2:
        raise ValueError("layer_dims needs at least input and output sizes")
    if len(data) == 0:
        raise ValueError("training dataset is empty")
    if data.input_dim != layer_dims[0]:
        raise ValueError(
            f"dataset input_dim {data.input_dim} != architecture input {layer_dims[0]}"
        )
    if data.labels.max() >= layer_dims[-1]:
        raise ValueError("dataset labels exceed the architecture's class count")

    rng = np.random.default_rng(cfg.seed)
    net = _init_network(layer_dims, rng)
    params = _read_params(net)

    if cfg.optimizer == "adam":
        m = np.zeros_like(params)
        v = np.zeros_like(params)
        beta1, beta2, eps = 0.9, 0.999, 1e-8
        t = 0

    n = len(data)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            grad = _batch_grad(net, data.inputs[idx], data.labels[idx])
            if cfg.optimizer == "sgd":
                params -= cfg.learning_rate * grad
            else:
                t += 1
                m = beta1 * m + (1 - beta1) * grad
                v = beta2 * v + (1 - beta2) * grad * grad
                m_hat = m / (1 - beta1**t)
                v_hat = v / (1 - beta2**t)
                params -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
            _write_params(net, params)
    return net


def retrain_with_adversarial(
    layer_dims, train: LabeledDataset, adv, cfg: TrainConfig
) -> Network:
    """Pretrain on the training set with the adversarial points (paired with
    their true labels) appended; empty adv reduces to plain pretraining."""
    adv = list(adv)
    if adv:
        extra = LabeledDataset(
            np.stack([a.x_tilde for a in adv]),
            np.array([a.y for a in adv], dtype=np.int64),
        )
        train = concat_datasets(train, extra)
    return pretrain(layer_dims, train, cfg)


def evaluate_accuracy(net: Network, data: LabeledDataset) -> float:
    """Fraction of points whose prediction matches the label."""
    if len(data) == 0:
        raise ValueError("dataset is empty")
    return float(np.mean(predict_batch(net, data.inputs) == data.labels))
