"""The cutting-plane fine-tuning loop.

Each iteration projects the pretrained parameters onto the current cut
polyhedron, linearizes the margin and loss constraints again at the new
iterate, and expands the candidate pool along the line between the
pretrained point and the iterate. The final model is picked from the pool
by a weighted sum of min-max-scaled training loss and total violation;
the Pareto front of the pool is available for reporting.
"""

import csv
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .cuts import CutPool, make_adversary_cuts, make_loss_cut, relax_loss_reference, total_violation
from .errors import ConfigError
from .network import Network, ParamVector, bias_indices, blend, from_vector, loss, to_vector
from .qp import INFEASIBLE, QPInstance, project, run_block_coordinate

__all__ = [
    "Candidate",
    "BlockConfig",
    "FinetuneConfig",
    "History",
    "HistoryRecord",
    "run_finetune",
    "scale_metrics",
    "pareto_front",
    "select_weighted",
]

DEFAULT_ALPHA_GRID = tuple(round(0.1 * k, 1) for k in range(1, 11))


@dataclass
class Candidate:
    """A parameter vector with its exactly recomputed pool metrics."""

    w: ParamVector
    loss: float
    violation: float
    origin: tuple  # (iterate k, line-search alpha)


@dataclass
class BlockConfig:
    p: float = 0.8
    T: int = 1

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ConfigError(f"block fix ratio p must be in (0,1), got {self.p}")
        if self.T < 1:
            raise ConfigError(f"block sweep count T must be >= 1, got {self.T}")


@dataclass
class FinetuneConfig:
    max_iterations: int = 20
    omega: float = 0.2
    delta: float = 1e-5
    epsilon_bar: float = 0.0
    xi: float = 0.0
    alpha_grid: tuple = DEFAULT_ALPHA_GRID
    block: BlockConfig | None = None
    seed: int = 0
    target_violation: float | None = None
    qp_tol: float = 1e-8
    qp_max_sweeps: int = 2000
    max_cuts: int = 50000

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ConfigError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if not 0.0 <= self.omega < 1.0:
            raise ConfigError(f"omega must lie in [0,1), got {self.omega}")
        if not self.delta > 0:
            raise ConfigError(f"delta must be positive, got {self.delta}")
        if self.epsilon_bar < 0:
            raise ConfigError(f"epsilon_bar must be nonnegative, got {self.epsilon_bar}")
        if self.xi < 0:
            raise ConfigError(f"xi must be nonnegative, got {self.xi}")
        grid = tuple(float(a) for a in self.alpha_grid)
        if not grid:
            raise ConfigError("alpha_grid must not be empty")
        if any(not 0.0 < a <= 1.0 for a in grid):
            raise ConfigError(f"alpha_grid entries must lie in (0,1], got {grid}")
        if 1.0 not in grid:
            raise ConfigError("alpha_grid must contain 1.0 (the iterate itself)")
        self.alpha_grid = grid
        if isinstance(self.block, dict):
            self.block = BlockConfig(**self.block)


@dataclass
class HistoryRecord:
    k: int
    qp_status: str
    loss_iterate: float
    violation_iterate: float
    best_violation: float
    pool_size: int
    wall_time_s: float


@dataclass
class History:
    records: list = field(default_factory=list)

    def append(self, record: HistoryRecord):
        if self.records and record.best_violation > self.records[-1].best_violation:
            raise AssertionError("best violation must be non-increasing")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k", "qp_status", "loss_iterate", "violation_iterate",
                             "best_violation", "pool_size", "wall_time_s"])
            for rec in self.records:
                writer.writerow([rec.k, rec.qp_status, repr(rec.loss_iterate),
                                 repr(rec.violation_iterate), repr(rec.best_violation),
                                 rec.pool_size, f"{rec.wall_time_s:.6f}"])


def scale_metrics(pool):
    """Min-max scale (loss, violation) over the pool; a metric with zero
    span maps to 0 for every candidate."""
    if not pool:
        raise ValueError("candidate pool is empty")
    losses = np.array([c.loss for c in pool])
    violations = np.array([c.violation for c in pool])

    def rescale(v):
        span = v.max() - v.min()
        if span == 0.0:
            return np.zeros_like(v)
        return (v - v.min()) / span

    return rescale(losses), rescale(violations)


def pareto_front(pool):
    """Candidates not dominated in (loss, violation)."""
    if not pool:
        raise ValueError("candidate pool is empty")
    losses = np.array([c.loss for c in pool])
    violations = np.array([c.violation for c in pool])
    keep = []
    for j in range(len(pool)):
        dominated = (
            (losses <= losses[j])
            & (violations <= violations[j])
            & ((losses < losses[j]) | (violations < violations[j]))
        ).any()
        if not dominated:
            keep.append(pool[j])
    return keep


def select_weighted(pool, omega: float) -> Candidate:
    """Minimizer of omega*scaled_loss + (1-omega)*scaled_violation.

    Ties break toward lower unscaled loss, then the earlier iterate.
    """
    if not 0.0 <= omega < 1.0:
        raise ConfigError(f"omega must lie in [0,1), got {omega}")
    l_tilde, v_tilde = scale_metrics(pool)
    scores = omega * l_tilde + (1.0 - omega) * v_tilde
    order = sorted(
        range(len(pool)), key=lambda j: (scores[j], pool[j].loss, pool[j].origin[0])
    )
    return pool[order[0]]


def _evaluate(net0: Network, w: ParamVector, train, adv):
    net = from_vector(net0, w)
    return net, loss(net, train), total_violation(net, adv)


def run_finetune(net0: Network, adv, train, cfg: FinetuneConfig):
    """Run the full fine-tuning loop.

    Returns (finetuned network, history, candidate pool). The pool always
    contains the pretrained parameters; on a detected-infeasible projection
    the loop stops early and selection happens over the pool so far.
    """
    adv = list(adv)
    if not adv:
        raise ValueError("adversarial set is empty")
    w0 = to_vector(net0)
    loss0 = loss(net0, train)
    v0 = total_violation(net0, adv)
    if not (np.isfinite(loss0) and np.isfinite(v0)):
        raise ValueError("pretrained model metrics are not finite")
    loss_ref = relax_loss_reference(loss0, cfg.xi)

    pool = [Candidate(w0, loss0, v0, (0, 0.0))]
    cutpool = CutPool(cfg.delta, cfg.epsilon_bar, cfg.max_cuts)
    cutpool.extend(make_adversary_cuts(net0, w0, adv, cfg.delta, cfg.epsilon_bar, iterate=0))
    cutpool.append(make_loss_cut(net0, w0, loss_ref, train, iterate=0))

    history = History()
    best_violation = v0
    duals = None
    always_free = bias_indices(net0)

    for k in range(1, cfg.max_iterations + 1):
        t0 = time.perf_counter()
        if cfg.block is not None:
            sol = run_block_coordinate(
                w0, cutpool, cfg.block.p, cfg.block.T, seed=cfg.seed + k,
                always_free=always_free, tol=cfg.qp_tol, max_sweeps=cfg.qp_max_sweeps,
            )
        else:
            warm = None
            if duals is not None:
                warm = np.zeros(len(cutpool))
                warm[: len(duals)] = duals
            sol = project(
                QPInstance(w0, cutpool, warm_start_duals=warm),
                tol=cfg.qp_tol, max_sweeps=cfg.qp_max_sweeps,
            )
        if sol.status == INFEASIBLE:
            history.append(HistoryRecord(k, sol.status, float("nan"), float("nan"),
                                         best_violation, len(pool),
                                         time.perf_counter() - t0))
            break
        wk = sol.w
        duals = sol.duals

        net_k = from_vector(net0, wk)
        cutpool.extend(
            make_adversary_cuts(net_k, wk, adv, cfg.delta, cfg.epsilon_bar, iterate=k)
        )
        cutpool.append(make_loss_cut(net_k, wk, loss_ref, train, iterate=k))

        loss_k = violation_k = None
        for alpha in cfg.alpha_grid:
            w_a = blend(w0, wk, alpha)
            _, l_a, v_a = _evaluate(net0, w_a, train, adv)
            pool.append(Candidate(w_a, l_a, v_a, (k, alpha)))
            best_violation = min(best_violation, v_a)
            if alpha == 1.0:
                loss_k, violation_k = l_a, v_a

        history.append(HistoryRecord(k, sol.status, loss_k, violation_k,
                                     best_violation, len(pool),
                                     time.perf_counter() - t0))
        if cfg.target_violation is not None and best_violation <= cfg.target_violation:
            break

    chosen = select_weighted(pool, cfg.omega)
    return from_vector(net0, chosen.w), history, pool


def pool_to_json(pool, path, include_params: bool = False):
    """Dump candidate metrics (optionally parameters) for offline analysis."""
    front = {id(c) for c in pareto_front(pool)}
    doc = []
    for c in pool:
        entry = {
            "iterate": c.origin[0],
            "alpha": c.origin[1],
            "loss": c.loss,
            "violation": c.violation,
            "on_pareto_front": id(c) in front,
        }
        if include_params:
            entry["parameters"] = c.w.values.tolist()
        doc.append(entry)
    with open(path, "w") as fh:
        json.dump(doc, fh)
