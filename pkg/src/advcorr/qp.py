"""Projection onto a polyhedron of accumulated cuts.

Solves min 1/2 ||w - anchor||^2 subject to G w <= r by dual coordinate
ascent (Hildreth): cycling over cut multipliers with the primal recovered
as w = anchor - G^T lambda. The dual dimension equals the number of cuts,
which stays far below the parameter count here, and multipliers warm-start
across outer iterations.

Two practical additions on top of the textbook scheme, neither changing
what is computed:
  * each sweep first evaluates all residuals in one BLAS product and then
    cycles only over cuts that are violated or carry a positive multiplier;
  * periodically, the currently active cuts are polished by solving the
    equality-constrained projection exactly; the result is accepted only
    when it passes the full feasibility and complementarity checks.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, QPInfeasibleError
from .network import ParamVector

__all__ = [
    "QPInstance",
    "QPSolution",
    "project",
    "restricted_project",
    "brute_force_project",
    "run_block_coordinate",
]

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible_detected"


@dataclass
class QPInstance:
    anchor: ParamVector
    cuts: object  # CutPool (anything with .matrix() and .rhs())
    free_mask: np.ndarray | None = None
    warm_start_duals: np.ndarray | None = None

    def __post_init__(self):
        if self.free_mask is not None:
            self.free_mask = np.asarray(self.free_mask, dtype=bool)
            if self.free_mask.shape != (len(self.anchor),):
                raise ValueError("free_mask must cover every parameter")
            if not self.free_mask.any():
                raise ValueError("free_mask must leave at least one coordinate free")
        if self.warm_start_duals is not None:
            self.warm_start_duals = np.asarray(self.warm_start_duals, dtype=np.float64)
            if (self.warm_start_duals < 0).any():
                raise ValueError("warm-start duals must be nonnegative")


@dataclass
class QPSolution:
    w: ParamVector
    duals: np.ndarray
    max_violation: float
    iterations_used: int
    status: str


def _cs_residual(lam, resid, r):
    if len(lam) == 0:
        return 0.0
    return float(np.max(np.abs(lam * resid) / (1.0 + np.abs(r))))


def _dual_value(anchor, w, lam, r):
    """Dual objective at (lam, w = anchor - G^T lam)."""
    diff = anchor - w
    return -0.5 * float(diff @ diff) + float(diff @ anchor) - float(lam @ r)


def _try_polish(anchor, G, r, lam, w, tol, cap, norms2):
    """Active-set finisher seeded from the sweep state.

    Projects exactly onto the face spanned by the cuts that currently look
    active (positive multiplier or nearly tight), then grows the active set
    one violated cut at a time with dual ratio tests, dropping blockers on
    the way. With the identity Hessian this is the classical dual
    active-set scheme; it ends in one of three ways:

      (w, lam, "optimal")      every cut satisfied, multipliers valid;
      (None, None, "infeasible")  a violated cut lies in the span of the
                                  active normals with no droppable blocker,
                                  an exact inconsistency certificate;
      (None, None, "failed")   candidate set too large or numerics gave
                               out; the caller resumes plain sweeps.
    """
    n, J = G.shape
    resid0 = G @ w - r
    cand = np.flatnonzero(((lam > 0) | (resid0 > -10.0 * tol)) & (norms2 > 0))
    if len(cand) > cap:
        return None, None, "failed"
    r_scale = 1.0 + (np.abs(r).max() if n else 0.0)

    sel: list[int] = []            # cut indices with cached Gram data
    pos: dict[int, int] = {}
    Gs = np.empty((0, J))
    M = np.empty((0, 0))           # Gram matrix of the selected normals
    b = np.empty(0)                # G_sel @ anchor - r_sel

    def select(p: int):
        nonlocal Gs, M, b
        k = len(sel)
        grown = np.empty((k + 1, k + 1))
        if k:
            row = Gs @ G[p]
            grown[:k, :k] = M
            grown[:k, k] = row
            grown[k, :k] = row
        grown[k, k] = norms2[p]
        M = grown
        Gs = np.vstack([Gs, G[p][None, :]])
        b = np.append(b, float(G[p] @ anchor) - r[p])
        pos[p] = k
        sel.append(p)

    for p in cand:
        select(int(p))

    def solve_face(act):
        if not act:
            return np.empty(0), anchor.copy(), True
        Msub = M[np.ix_(act, act)]
        bsub = b[act]
        try:
            la = np.linalg.solve(Msub, bsub)
        except np.linalg.LinAlgError:
            la = np.linalg.lstsq(Msub, bsub, rcond=None)[0]
        if not np.isfinite(la).all():
            la = np.linalg.lstsq(Msub, bsub, rcond=None)[0]
        wc = anchor - Gs[act].T @ la
        sel_act = [sel[k] for k in act]
        ok = np.max(np.abs(G[sel_act] @ wc - r[sel_act])) <= 10.0 * tol * r_scale
        return la, wc, ok

    def settle(act):
        # Drop cuts until the face system is consistent with lam >= 0. An
        # inconsistent start (e.g. stale warm multipliers) just sheds cuts;
        # phase 2 re-adds whatever actually belongs in the active set.
        for _ in range(len(act) + 2):
            la, wc, ok = solve_face(act)
            if ok and (len(la) == 0 or la.min() >= -1e-12):
                return la, wc
            if not act:
                return None
            act.pop(int(np.nanargmin(la)) if len(la) else 0)
        return None

    # Phase 1: reduce the warm candidate set to a dual-feasible face.
    active = list(range(len(sel)))
    settled = settle(active)
    if settled is None:
        return None, None, "failed"
    lam_a, w_c = settled

    # Phase 2: add violated cuts with ratio-test steps.
    for _ in range(3 * n + 50):
        resid = G @ w_c - r
        p = int(np.argmax(resid))
        if resid[p] <= tol:
            lam_full = np.zeros(n)
            if active:
                lam_full[[sel[k] for k in active]] = np.maximum(lam_a, 0.0)
            return w_c, lam_full, "optimal"
        if norms2[p] == 0.0 or pos.get(p) in active:
            return None, None, "failed"
        if p not in pos:
            select(p)
        pp = pos[p]
        lam_p = 0.0
        added = False
        for _ in range(len(active) + 5):
            v = float(G[p] @ w_c) - r[p]
            if v <= tol:
                added = True  # satisfied through drops alone
                break
            if active:
                Msub = M[np.ix_(active, active)]
                u = M[active, pp]
                try:
                    x = np.linalg.solve(Msub, u)
                except np.linalg.LinAlgError:
                    x = np.linalg.lstsq(Msub, u, rcond=None)[0]
                dlam = -x
                q = norms2[p] - float(u @ x)
            else:
                x = np.empty(0)
                dlam = np.empty(0)
                q = norms2[p]
            t_full = v / q if q > 1e-12 * norms2[p] else math.inf
            t_block = math.inf
            j_block = -1
            for jj, dj in enumerate(dlam):
                if dj < -1e-14:
                    tb = lam_a[jj] / -dj
                    if tb < t_block:
                        t_block = tb
                        j_block = jj
            if not math.isfinite(t_full) and not math.isfinite(t_block):
                return None, None, "infeasible"
            t = min(t_full, t_block)
            if active:
                lam_a = lam_a + t * dlam
                w_c = w_c - t * (G[p] - Gs[active].T @ x)
            else:
                w_c = w_c - t * G[p]
            lam_p += t
            if t_block < t_full:
                lam_a = np.delete(lam_a, j_block)
                active.pop(j_block)
            else:
                active.append(pp)
                lam_a = np.append(lam_a, lam_p)
                added = True
                break
        if not added:
            return None, None, "failed"
        settled = settle(active)  # re-anchor against incremental drift
        if settled is None:
            return None, None, "failed"
        lam_a, w_c = settled
    return None, None, "failed"


def _hildreth(anchor, G, r, lam0, tol, max_sweeps, dual_bound, polish_cap=2000):
    """Core dual coordinate ascent. Returns (w, lam, max_viol, sweeps, status)."""
    n = G.shape[0]
    if n == 0:
        return anchor.copy(), np.empty(0), 0.0, 0, OPTIMAL
    norms2 = np.einsum("ij,ij->i", G, G)
    lam = np.zeros(n) if lam0 is None else lam0.astype(np.float64).copy()
    if lam0 is not None and len(lam) != n:
        raise ValueError(f"warm-start duals length {len(lam)} != cut count {n}")
    w = anchor - G.T @ lam if lam.any() else anchor.copy()

    best = (math.inf, None, None)
    status = MAX_ITER
    sweeps = 0
    next_polish = 3
    zero_rows = norms2 == 0.0
    viol_hist: list[float] = []
    dual_hist: list[float] = []
    stall_window = 100

    def attempt_polish():
        # Adopt the finisher's result only when it passes the same checks
        # the sweep loop terminates on.
        nonlocal w, lam
        w_c, lam_c, outcome = _try_polish(anchor, G, r, lam, w, tol, polish_cap, norms2)
        if outcome != "optimal":
            return outcome
        resid_c = G @ w_c - r
        viol_c = max(float(resid_c.max()), 0.0)
        if viol_c <= tol and _cs_residual(lam_c, resid_c, r) <= tol:
            w, lam = w_c, lam_c
            return "optimal"
        return "failed"

    for sweep in range(max_sweeps):
        resid = G @ w - r
        max_viol = max(float(resid.max()), 0.0)
        if max_viol < best[0]:
            best = (max_viol, w.copy(), lam.copy())
        if max_viol <= tol and _cs_residual(lam, resid, r) <= tol:
            status = OPTIMAL
            break
        # A violated cut with a zero normal (possible after substituting
        # fixed coordinates) certifies infeasibility exactly.
        if zero_rows.any() and (resid[zero_rows] > tol).any():
            status = INFEASIBLE
            break
        if float(np.linalg.norm(lam)) > dual_bound:
            status = INFEASIBLE
            break
        # Heuristic divergence detection. Coordinate ascent and the adopted
        # polish steps increase the dual objective monotonically; it
        # converges on feasible systems and grows without bound on
        # infeasible ones. When the primal violation has plateaued well
        # above tol while the dual objective still climbs at an undiminished
        # rate, give the exact polish one last chance, then declare
        # infeasibility.
        viol_hist.append(max_viol)
        dual_hist.append(_dual_value(anchor, w, lam, r))
        if sweep >= stall_window and sweep % 20 == 0:
            half = stall_window // 2
            stalled = (
                min(viol_hist[-half:]) > min(viol_hist[-stall_window:-half]) * (1 - 1e-3)
                and max_viol > 1e3 * tol
            )
            g_new = dual_hist[-1] - dual_hist[-half]
            g_old = dual_hist[-half] - dual_hist[-stall_window]
            climbing = (
                g_old > 0
                and g_new > 0.5 * g_old
                and g_new > half * 1e-14 * (1.0 + abs(dual_hist[-1]))
            )
            if stalled and climbing:
                outcome = attempt_polish()
                if outcome == "optimal":
                    sweeps += 1
                    status = OPTIMAL
                    break
                status = INFEASIBLE
                break
        if sweep >= next_polish:
            next_polish = 2 * sweep + 10
            outcome = attempt_polish()
            if outcome == "optimal":
                sweeps += 1
                status = OPTIMAL
                break
            if outcome == "infeasible":
                status = INFEASIBLE
                break
        work = np.flatnonzero(((resid > 0) | (lam > 0)) & (norms2 > 0))
        for i in work:
            g = G[i]
            res = float(g @ w) - r[i]
            new = lam[i] + res / norms2[i]
            if new < 0.0:
                new = 0.0
            d = new - lam[i]
            if d != 0.0:
                w -= d * g
                lam[i] = new
        sweeps += 1

    if status == MAX_ITER:
        resid = G @ w - r
        max_viol = max(float(resid.max()), 0.0)
        if max_viol < best[0]:
            best = (max_viol, w, lam)
        max_viol, w, lam = best
    else:
        resid = G @ w - r
        max_viol = max(float(resid.max()), 0.0)
    return w, lam, max_viol, sweeps, status


def project(inst: QPInstance, tol: float = 1e-8, max_sweeps: int = 2000,
            dual_bound: float = 1e8) -> QPSolution:
    """Project the anchor onto the cut polyhedron.

    With a free_mask, the masked-out coordinates stay fixed at the anchor
    and their contribution moves into the right-hand side.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if inst.free_mask is not None:
        return restricted_project(
            inst.anchor, inst.cuts, np.flatnonzero(inst.free_mask),
            tol=tol, max_sweeps=max_sweeps, dual_bound=dual_bound,
            warm_start_duals=inst.warm_start_duals,
        )
    G = inst.cuts.matrix()
    r = inst.cuts.rhs()
    w, lam, max_viol, sweeps, status = _hildreth(
        inst.anchor.values, G, r, inst.warm_start_duals, tol, max_sweeps, dual_bound
    )
    return QPSolution(ParamVector(w, inst.anchor.offsets), lam, max_viol, sweeps, status)


def restricted_project(anchor: ParamVector, cuts, free_idx, fixed_values=None,
                       tol: float = 1e-8, max_sweeps: int = 2000,
                       dual_bound: float = 1e8,
                       warm_start_duals=None) -> QPSolution:
    """Projection over a subset of coordinates, the rest pinned.

    Pinned coordinates take their value from `fixed_values` (default: the
    anchor); substituting them shifts each cut's right-hand side.
    """
    free = np.unique(np.asarray(free_idx, dtype=np.intp))
    J = len(anchor)
    if len(free) == 0:
        raise ValueError("free index set is empty")
    if free[0] < 0 or free[-1] >= J:
        raise ValueError("free indices outside parameter range")
    base = anchor.values if fixed_values is None else np.asarray(fixed_values, dtype=np.float64)
    if base.shape != (J,):
        raise ValueError("fixed_values must match the parameter count")

    G = cuts.matrix()
    r = cuts.rhs()
    fixed_mask = np.ones(J, dtype=bool)
    fixed_mask[free] = False
    if G.shape[0]:
        G_free = np.ascontiguousarray(G[:, free])
        r_adj = r - G[:, fixed_mask] @ base[fixed_mask]
    else:
        G_free = np.empty((0, len(free)))
        r_adj = r
    w_red, lam, max_viol, sweeps, status = _hildreth(
        anchor.values[free], G_free, r_adj, warm_start_duals, tol, max_sweeps, dual_bound
    )
    w_full = base.copy()
    w_full[free] = w_red
    return QPSolution(ParamVector(w_full, anchor.offsets), lam, max_viol, sweeps, status)


def brute_force_project(anchor: ParamVector, cuts) -> ParamVector:
    """Enumeration oracle: try every subset of cuts as the active set and
    return the KKT-consistent feasible minimizer. Only for small systems."""
    G = cuts.matrix()
    r = cuts.rhs()
    n = G.shape[0]
    if n > 12:
        raise ValueError(f"enumeration oracle limited to 12 cuts, got {n}")
    a = anchor.values
    scale = 1.0 + (np.abs(r).max() if n else 0.0)
    best_w = None
    best_obj = math.inf
    for mask in range(1 << n):
        subset = [i for i in range(n) if mask >> i & 1]
        if subset:
            A = G[subset]
            M = A @ A.T
            b = A @ a - r[subset]
            lam = np.linalg.lstsq(M, b, rcond=None)[0]
            w = a - A.T @ lam
            if np.max(np.abs(A @ w - r[subset])) > 1e-9 * scale:
                continue
            if lam.min() < -1e-9:
                continue
        else:
            w = a
        if n and (G @ w - r).max() > 1e-9 * scale:
            continue
        obj = float(np.sum((w - a) ** 2))
        if obj < best_obj:
            best_obj = obj
            best_w = w
    if best_w is None:
        raise QPInfeasibleError("no active-set subset yields a feasible KKT point")
    return ParamVector(best_w, anchor.offsets)


def run_block_coordinate(anchor: ParamVector, cuts, p: float, T: int, seed: int,
                         always_free, tol: float = 1e-8, max_sweeps: int = 2000,
                         dual_bound: float = 1e8) -> QPSolution:
    """Block-coordinate approximation of the projection.

    Fixes a ratio p of the sampled index universe each solve and keeps the
    rest free; re-selection across sweeps retains half of the previously
    free indices so consecutive free sets overlap. Indices in `always_free`
    (the biases, in the fine-tuning setting) are never fixed. An infeasible
    restricted solve is retried once with a doubled free set.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"fix ratio p must be in (0,1), got {p}")
    if T < 1:
        raise ValueError(f"sweep count T must be >= 1, got {T}")
    J = len(anchor)
    always_free = np.unique(np.asarray(list(always_free), dtype=np.intp)) \
        if len(list(always_free)) else np.empty(0, dtype=np.intp)
    if len(always_free) and (always_free[0] < 0 or always_free[-1] >= J):
        raise ValueError("always_free indices outside parameter range")
    universe = np.setdiff1d(np.arange(J), always_free)
    if len(universe) == 0:
        return restricted_project(anchor, cuts, always_free,
                                  tol=tol, max_sweeps=max_sweeps, dual_bound=dual_bound)

    n_v = max(1, int((1.0 - p) * len(universe)))
    n_half = max(1, int((1.0 - p) * len(universe) / 2))
    rng = np.random.default_rng(seed)
    J_v = np.sort(rng.choice(universe, size=n_v, replace=False))
    J_0 = np.empty(0, dtype=np.intp)

    w_cur = anchor.values.copy()
    sol = None
    total_sweeps = 0
    for _ in range(T):
        free = np.union1d(np.union1d(J_v, J_0), always_free)
        sol = restricted_project(anchor, cuts, free, fixed_values=w_cur,
                                 tol=tol, max_sweeps=max_sweeps, dual_bound=dual_bound)
        total_sweeps += sol.iterations_used
        if sol.status == INFEASIBLE:
            sampled = np.union1d(J_v, J_0)
            pool = np.setdiff1d(universe, sampled)
            extra = rng.choice(pool, size=min(len(sampled), len(pool)), replace=False)
            free = np.union1d(free, extra)
            sol = restricted_project(anchor, cuts, free, fixed_values=w_cur,
                                     tol=tol, max_sweeps=max_sweeps, dual_bound=dual_bound)
            total_sweeps += sol.iterations_used
            if sol.status == INFEASIBLE:
                raise NumericalError(
                    "restricted projection infeasible even after doubling the free set"
                )
        w_cur = sol.w.values
        prev = np.union1d(J_v, J_0)
        rest = np.setdiff1d(universe, prev)
        J_0 = np.sort(rng.choice(prev, size=min(n_half, len(prev)), replace=False))
        J_v = np.sort(rng.choice(rest, size=min(n_half, len(rest)), replace=False))
    return QPSolution(sol.w, sol.duals, sol.max_violation, total_sweeps, sol.status)
