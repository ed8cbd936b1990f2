"""Adversarial data generation and robustness measurement.

FGSM and PGD under the l-infinity norm with inputs clipped to [0,1]. PGD
starts from the clean point (no random restart) so every operation here is
deterministic given its arguments.
"""

import json
from dataclasses import asdict, dataclass

import numpy as np

from .cuts import margin_violation
from .errors import AdversarialShortfallError, ConfigError, DataError
from .network import (
    LabeledDataset,
    Network,
    forward_batch,
    grad_loss_input_batch,
    predict,
    predict_batch,
)

__all__ = [
    "AdversarialExample",
    "AttackConfig",
    "ATTACK_PRESETS",
    "fgsm",
    "pgd",
    "generate_adv_dataset",
    "attack_accuracy",
    "estimate_resilience",
    "save_adv_dataset",
    "load_adv_dataset",
]


@dataclass
class AdversarialExample:
    """A perturbed input with its true (unperturbed) label."""

    x_tilde: np.ndarray
    y: int
    source_index: int
    violation_at_gen: float

    def __post_init__(self):
        self.x_tilde = np.asarray(self.x_tilde, dtype=np.float64)
        self.y = int(self.y)
        self.source_index = int(self.source_index)
        self.violation_at_gen = float(self.violation_at_gen)


@dataclass
class AttackConfig:
    kind: str = "pgd"
    epsilon: float = 0.1
    step_size: float = 0.01
    iterations: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("fgsm", "pgd"):
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        # epsilon = 0 is allowed as the degenerate no-op attack (it makes
        # attacked accuracy coincide with clean accuracy).
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be nonnegative, got {self.epsilon}")
        if not self.step_size > 0:
            raise ConfigError(f"step_size must be positive, got {self.step_size}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")


ATTACK_PRESETS = {
    "mnist_pgd": AttackConfig(kind="pgd", epsilon=0.1, step_size=0.01, iterations=50),
    "cifar_pgd": AttackConfig(kind="pgd", epsilon=8 / 255, step_size=3 / 255, iterations=3),
    "fgsm": AttackConfig(kind="fgsm", epsilon=0.1),
}


def _check_ball(X_out: np.ndarray, X_src: np.ndarray, epsilon: float):
    assert np.all(X_out >= 0.0) and np.all(X_out <= 1.0)
    assert np.abs(X_out - X_src).max() <= epsilon + 1e-12


def _fgsm_batch(net: Network, X: np.ndarray, y: np.ndarray, epsilon: float) -> np.ndarray:
    grad = grad_loss_input_batch(net, X, y)
    out = np.clip(X + epsilon * np.sign(grad), 0.0, 1.0)
    _check_ball(out, X, epsilon)
    return out


def fgsm(net: Network, x: np.ndarray, y: int, epsilon: float) -> np.ndarray:
    """One signed-gradient step of size epsilon, clipped to [0,1]."""
    if epsilon < 0:
        raise ConfigError(f"epsilon must be nonnegative, got {epsilon}")
    x = np.asarray(x, dtype=np.float64)
    return _fgsm_batch(net, x[None, :], np.asarray([y]), epsilon)[0]


def _pgd_batch(net: Network, X: np.ndarray, y: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    lo = np.clip(X - cfg.epsilon, 0.0, 1.0)
    hi = np.clip(X + cfg.epsilon, 0.0, 1.0)
    cur = X.copy()
    for _ in range(cfg.iterations):
        grad = grad_loss_input_batch(net, cur, y)
        cur = np.clip(cur + cfg.step_size * np.sign(grad), lo, hi)
    _check_ball(cur, X, cfg.epsilon)
    return cur


def pgd(net: Network, x: np.ndarray, y: int, cfg: AttackConfig) -> np.ndarray:
    """Iterated signed-gradient ascent projected onto the epsilon ball."""
    if cfg.kind != "pgd":
        raise ConfigError(f"pgd called with attack kind {cfg.kind!r}")
    x = np.asarray(x, dtype=np.float64)
    return _pgd_batch(net, x[None, :], np.asarray([y]), cfg)[0]


def _attack_batch(net: Network, X: np.ndarray, y: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    if cfg.kind == "fgsm":
        return _fgsm_batch(net, X, y, cfg.epsilon)
    return _pgd_batch(net, X, y, cfg)


def generate_adv_dataset(
    net: Network, train: LabeledDataset, size: int, cfg: AttackConfig
) -> list[AdversarialExample]:
    """Attack every correctly classified training point and keep, per label,
    the `size / num_classes` misclassified perturbations with the largest
    margin violation, sorted within each label by descending violation."""
    C = net.num_classes
    if size < 1 or size % C != 0:
        raise ConfigError(f"adversarial set size {size} must be a positive multiple of {C}")
    per_label = size // C

    preds = predict_batch(net, train.inputs)
    correct = np.flatnonzero(preds == train.labels)
    candidates: dict[int, list] = {y: [] for y in range(C)}
    if len(correct):
        attacked = _attack_batch(net, train.inputs[correct], train.labels[correct], cfg)
        logits = forward_batch(net, attacked)
        for row, src in enumerate(correct):
            y = int(train.labels[src])
            v = margin_violation(logits[row], y)
            if v > 0.0:
                candidates[y].append((v, int(src), attacked[row]))

    found = {y: len(c) for y, c in candidates.items()}
    if any(n < per_label for n in found.values()):
        raise AdversarialShortfallError(per_label, found)

    out = []
    for y in range(C):
        ranked = sorted(candidates[y], key=lambda t: (-t[0], t[1]))
        for v, src, x_tilde in ranked[:per_label]:
            out.append(AdversarialExample(x_tilde, y, src, v))
    return out


def attack_accuracy(net: Network, data: LabeledDataset, cfg: AttackConfig) -> float:
    """Accuracy of the network on per-point attacked versions of `data`."""
    if len(data) == 0:
        raise ValueError("dataset is empty")
    attacked = _attack_batch(net, data.inputs, data.labels, cfg)
    return float(np.mean(predict_batch(net, attacked) == data.labels))


def estimate_resilience(
    net: Network, x: np.ndarray, epsilon: float, n_samples: int, seed: int
) -> float:
    """Monte Carlo volume fraction of the epsilon ball (intersected with
    [0,1]^m) that keeps the same predicted class as x."""
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    x = np.asarray(x, dtype=np.float64)
    label = predict(net, x)
    lo = np.clip(x - epsilon, 0.0, 1.0)
    hi = np.clip(x + epsilon, 0.0, 1.0)
    rng = np.random.default_rng(seed)
    samples = rng.uniform(lo, hi, size=(n_samples, len(x)))
    return float(np.mean(predict_batch(net, samples) == label))


# ---------------------------------------------------------------------------
# serialization


def save_adv_dataset(path, examples, cfg: AttackConfig, model_checksum: str,
                     extra: dict | None = None):
    doc = {
        "epsilon": cfg.epsilon,
        "attack": asdict(cfg),
        "model_checksum": model_checksum,
        **(extra or {}),
        "examples": [
            {
                "x": e.x_tilde.tolist(),
                "y": e.y,
                "source_index": e.source_index,
                "violation": e.violation_at_gen,
            }
            for e in examples
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_adv_dataset(path):
    """Returns (examples, attack config, model checksum)."""
    with open(path) as fh:
        doc = json.load(fh)
    try:
        cfg = AttackConfig(**doc["attack"])
        examples = [
            AdversarialExample(e["x"], e["y"], e["source_index"], e["violation"])
            for e in doc["examples"]
        ]
        checksum = doc["model_checksum"]
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed adversarial dataset {path}: {exc}") from exc
    return examples, cfg, checksum
