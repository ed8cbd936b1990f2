"""Violation metric and linear cut generation in parameter space.

Each cut is one inequality g·w <= r. Adversary cuts linearize the
correct-classification margin constraints of the misclassified points at a
chosen iterate; loss cuts linearize the no-worse-training-loss constraint.
An optional l1-ball strengthening over input perturbations tightens the
adversary cuts by a constant on the right-hand side.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .network import (
    LabeledDataset,
    Network,
    ParamVector,
    forward_batch,
    grad_loss_params,
    logit_jacobians,
    loss,
)

__all__ = [
    "Cut",
    "CutMeta",
    "CutPool",
    "margin_violation",
    "total_violation",
    "make_adversary_cuts",
    "make_loss_cut",
    "relax_loss_reference",
    "dump_cut_pool",
    "load_cut_pool",
]

ADVERSARY = "adversary"
LOSS = "loss"


@dataclass(frozen=True)
class CutMeta:
    """Provenance: which linearization iterate, and for adversary cuts which
    adversarial point / competing label produced this inequality."""

    iterate: int
    adv_index: int | None = None
    competing_label: int | None = None


@dataclass
class Cut:
    normal: np.ndarray
    rhs: float
    kind: str
    meta: CutMeta

    def __post_init__(self):
        self.normal = np.asarray(self.normal, dtype=np.float64)
        self.rhs = float(self.rhs)
        if self.normal.ndim != 1:
            raise ValueError("cut normal must be 1-D")
        if not np.isfinite(self.normal).all() or not np.isfinite(self.rhs):
            raise ValueError("cut coefficients must be finite")
        if self.kind not in (ADVERSARY, LOSS):
            raise ValueError(f"unknown cut kind {self.kind!r}")

    def residual(self, w: np.ndarray) -> float:
        """g·w - r; positive means violated."""
        return float(self.normal @ w - self.rhs)


class CutPool:
    """Append-only collection of cuts plus the margin/robustness constants.

    The pool keeps a lazily rebuilt dense (n_cuts, J) matrix of normals for
    the QP solver; individual Cut objects are re-pointed at rows of that
    matrix so the coefficients are stored once.
    """

    def __init__(self, delta: float, epsilon_bar: float = 0.0, max_cuts: int = 50000):
        if not delta > 0:
            raise ConfigError(f"delta must be positive, got {delta}")
        if epsilon_bar < 0:
            raise ConfigError(f"epsilon_bar must be nonnegative, got {epsilon_bar}")
        if max_cuts < 1:
            raise ConfigError("max_cuts must be at least 1")
        self.delta = float(delta)
        self.epsilon_bar = float(epsilon_bar)
        self.max_cuts = int(max_cuts)
        self.cuts: list[Cut] = []
        self._matrix = None
        self._rhs = None

    def __len__(self) -> int:
        return len(self.cuts)

    def append(self, cut: Cut):
        if len(self.cuts) + 1 > self.max_cuts:
            raise ConfigError(
                f"cut pool limit {self.max_cuts} exceeded; raise max_cuts or "
                f"lower the iteration budget"
            )
        self.cuts.append(cut)
        self._matrix = None
        self._rhs = None

    def extend(self, cuts):
        for cut in cuts:
            self.append(cut)

    def count(self, kind: str) -> int:
        return sum(1 for c in self.cuts if c.kind == kind)

    def matrix(self) -> np.ndarray:
        """Dense (n_cuts, J) array of cut normals, cached until next append."""
        if self._matrix is None:
            self._matrix = np.array([c.normal for c in self.cuts], dtype=np.float64)
            self._rhs = np.array([c.rhs for c in self.cuts], dtype=np.float64)
            for i, c in enumerate(self.cuts):
                c.normal = self._matrix[i]
        return self._matrix

    def rhs(self) -> np.ndarray:
        self.matrix()
        return self._rhs


def margin_violation(logits: np.ndarray, y: int) -> float:
    """Classification-margin deficit max(0, max_{i!=y} f_i - f_y)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or len(logits) < 2:
        raise ValueError("need logits for at least two classes")
    y = int(y)
    if not 0 <= y < len(logits):
        raise ValueError(f"label {y} outside [0, {len(logits)})")
    others = np.delete(logits, y)
    return float(max(0.0, others.max() - logits[y]))


def total_violation(net: Network, adv) -> float:
    """Sum of margin violations over the adversarial set."""
    adv = list(adv)
    if not adv:
        raise ValueError("adversarial set is empty")
    X = np.stack([a.x_tilde for a in adv])
    logits = forward_batch(net, X)
    return float(sum(margin_violation(z, a.y) for z, a in zip(logits, adv)))


def make_adversary_cuts(
    net_at_wk: Network,
    wk: ParamVector,
    adv,
    delta: float,
    epsilon_bar: float = 0.0,
    iterate: int = 0,
) -> list[Cut]:
    """One cut per adversarial point and competing label, linearized at wk.

    The margin constraint f_y >= f_i + delta linearized at wk becomes
    g·w <= g·wk - (f_i - f_y) - delta with g the gradient of f_i - f_y with
    respect to the parameters. With epsilon_bar > 0 the right-hand side is
    further reduced by epsilon_bar * max_m |d f_i/d x_m - d f_y/d x_m|, the
    exact maximum of the linearized perturbation term over the l1 ball.
    """
    if not delta > 0:
        raise ConfigError(f"delta must be positive, got {delta}")
    if epsilon_bar < 0:
        raise ConfigError(f"epsilon_bar must be nonnegative, got {epsilon_bar}")
    wk_vals = wk.values
    cuts = []
    for n, example in enumerate(adv):
        Jp, Jx, logits = logit_jacobians(net_at_wk, example.x_tilde)
        y = int(example.y)
        for i in range(net_at_wk.num_classes):
            if i == y:
                continue
            g = Jp[i] - Jp[y]
            margin = logits[i] - logits[y]
            robust = 0.0
            if epsilon_bar > 0.0:
                robust = epsilon_bar * float(np.abs(Jx[i] - Jx[y]).max())
            rhs = float(g @ wk_vals) - margin - delta - robust
            cuts.append(
                Cut(g, rhs, ADVERSARY,
                    CutMeta(iterate=iterate, adv_index=n, competing_label=i))
            )
    return cuts


def make_loss_cut(
    net_at_wk: Network,
    wk: ParamVector,
    loss_ref: float,
    train: LabeledDataset,
    iterate: int = 0,
) -> Cut:
    """Linearized no-worse-loss constraint at wk against reference loss_ref.

    g·w <= g·wk - (l(wk) - loss_ref) with g the full-batch training-loss
    gradient at wk. At wk equal to the pretrained parameters and loss_ref
    their loss, the constant term vanishes.
    """
    g = grad_loss_params(net_at_wk, train).values
    loss_k = loss(net_at_wk, train)
    rhs = float(g @ wk.values) - (loss_k - float(loss_ref))
    return Cut(g, rhs, LOSS, CutMeta(iterate=iterate))


def relax_loss_reference(loss_ref: float, xi: float) -> float:
    """Allow the training loss to rise by xi above the pretrained level."""
    if xi < 0:
        raise ConfigError(f"xi must be nonnegative, got {xi}")
    return float(loss_ref) + float(xi)


# ---------------------------------------------------------------------------
# diagnostic binary dump: little-endian float64 stream
# [count, J, then per cut: g (J values), rhs, kind code, iterate, adv_index,
#  competing_label] with -1 standing in for absent meta fields.

_KIND_CODE = {ADVERSARY: 0.0, LOSS: 1.0}
_CODE_KIND = {0.0: ADVERSARY, 1.0: LOSS}


def dump_cut_pool(pool: CutPool, path):
    J = len(pool.cuts[0].normal) if pool.cuts else 0
    with open(path, "wb") as fh:
        fh.write(struct.pack("<2d", float(len(pool.cuts)), float(J)))
        for c in pool.cuts:
            fh.write(c.normal.astype("<f8").tobytes())
            meta = (
                c.rhs,
                _KIND_CODE[c.kind],
                float(c.meta.iterate),
                float(-1 if c.meta.adv_index is None else c.meta.adv_index),
                float(-1 if c.meta.competing_label is None else c.meta.competing_label),
            )
            fh.write(struct.pack("<5d", *meta))


def load_cut_pool(path, delta: float, epsilon_bar: float = 0.0) -> CutPool:
    pool = CutPool(delta, epsilon_bar)
    with open(path, "rb") as fh:
        count, J = struct.unpack("<2d", fh.read(16))
        count, J = int(count), int(J)
        for _ in range(count):
            g = np.frombuffer(fh.read(8 * J), dtype="<f8")
            rhs, code, iterate, adv_index, label = struct.unpack("<5d", fh.read(40))
            meta = CutMeta(
                iterate=int(iterate),
                adv_index=None if adv_index < 0 else int(adv_index),
                competing_label=None if label < 0 else int(label),
            )
            pool.append(Cut(g.copy(), rhs, _CODE_KIND[code], meta))
    return pool
