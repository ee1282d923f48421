"""Expected variational inequality (EVI) solving with exact certificates.

Given a bounded operator S on a convex body Y, an EVI solution to error
eps is a finite-support distribution D with

    E_{p ~ D} [ S(p)^T (y - p) ] <= eps   for every y in Y.

Because the left side is linear in y, its exact maximum over Y is one
linear-optimization call in the direction of a = E[S(p)]:

    gap(D) = max_y a^T y - E[S(p)^T p],

which is what ``certify_evi`` returns.  The solver below runs the
regret-based self-play loop (an OGD iterate plays p_i = y_i, so the
per-round term S(p_i)^T (y_i - p_i) vanishes and the uniform prefix
certificate equals the y-player's average regret), augmented with three
purely deterministic accelerations, each of which only ever improves the
certified gap:

* best-response probes: point masses at fixed points of
  p -> argmax_y S(p)^T y certify immediately for operators constant or
  contractive in p;
* weight polishing: a small cutting-plane LP re-weights the collected
  atoms, solving the restricted game exactly;
* step-decay refinement: geometrically shrinking steps drive oscillating
  iterates into the neighborhood of a mixed solution, which the LP then
  exploits.

When the target is unreachable within the iteration cap the solver
returns the best certified distribution and flags the call; ledgers
always consume the realized certified gap, never the target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import optimize

from .errors import ContractError
from .geometry import (
    ConvexBody,
    FiniteSupportDistribution,
    point_mass,
    uniform_over,
)

NORM_SLACK = 1e-9


def eps_schedule(t: int, policy: str = "default") -> float:
    """Per-round EVI error targets; t is 1-based."""
    if t < 1:
        raise ContractError("round index must be >= 1")
    if policy == "default":
        return 1.0 / (10.0 * t * t)
    if policy == "inverse":
        return 1.0 / t
    if policy == "sqrt":
        return 1.0 / math.sqrt(t)
    raise ContractError(f"unknown eps policy {policy!r}")


@dataclass
class EviProblem:
    """Operator S over a body with a declared sup-norm bound.

    norm_bound must dominate ||S(p)|| at every point the solver touches;
    each evaluation is checked and a violation is a contract error.
    """

    body: ConvexBody
    operator: Callable[[np.ndarray], np.ndarray]
    norm_bound: float
    target_eps: float
    label: str = ""

    def __post_init__(self):
        if not np.isfinite(self.norm_bound) or self.norm_bound < 0:
            raise ContractError("norm_bound must be finite and >= 0")
        if not np.isfinite(self.target_eps) or self.target_eps <= 0:
            raise ContractError("target_eps must be positive")


@dataclass
class EviSolution:
    dist: FiniteSupportDistribution
    certified_gap: float
    target_eps: float
    op_evals: int
    hit_cap: bool
    atom_op_values: np.ndarray  # S evaluated at the returned atoms, row-aligned

    @property
    def support_size(self) -> int:
        return self.dist.support_size


@dataclass
class SolverConfig:
    br_probes: int = 6
    ogd_iters: int = 64
    pool_cap: int = 40
    lp_max_cuts: int = 16
    refine_levels: int = 24
    refine_steps: int = 3
    lp_every_levels: int = 12


def support_budget(norm_bound: float, outer_radius: float, eps: float) -> int:
    """Sufficient self-play length k = ceil((4 B R / eps)^2), floored at 1."""
    if eps <= 0:
        raise ContractError("eps must be positive")
    raw = (4.0 * norm_bound * outer_radius / eps) ** 2
    if raw >= 1e15:
        return 10**15
    return max(1, int(math.ceil(raw)))


def certify_evi(dist: FiniteSupportDistribution,
                operator: Callable[[np.ndarray], np.ndarray],
                op_values: Optional[np.ndarray] = None) -> float:
    """Exact EVI gap of dist for the operator, via one linopt call."""
    if op_values is None:
        op_values = np.array([np.asarray(operator(p), dtype=float)
                              for p in dist.points])
    a = op_values.T @ dist.weights
    b = float(np.einsum("ij,ij->i", op_values, dist.points) @ dist.weights)
    ystar = dist.body.linopt(-a)
    return float(a @ ystar) - b


class _CheckedOperator:
    """Wraps the raw operator with finiteness/norm checks and an eval count."""

    def __init__(self, problem: EviProblem):
        self.problem = problem
        self.evals = 0
        self.max_norm_seen = 0.0
        self._slack = NORM_SLACK * max(1.0, problem.norm_bound)

    def __call__(self, p: np.ndarray) -> np.ndarray:
        val = np.asarray(self.problem.operator(p), dtype=float)
        self.evals += 1
        if val.shape != (self.problem.body.dim,):
            raise ContractError(
                f"operator returned shape {val.shape}, expected ({self.problem.body.dim},)")
        if not np.all(np.isfinite(val)):
            raise ContractError("operator returned non-finite values"
                                + (f" [{self.problem.label}]" if self.problem.label else ""))
        norm = float(np.linalg.norm(val))
        self.max_norm_seen = max(self.max_norm_seen, norm)
        if norm > self.problem.norm_bound + self._slack:
            raise ContractError(
                f"operator norm {norm} exceeds declared bound {self.problem.norm_bound}"
                + (f" [{self.problem.label}]" if self.problem.label else ""))
        return val


class _AtomPool:
    """Deduplicated (point, value) pool with a deterministic eviction rule:
    atoms that last received zero LP weight leave first, then the oldest."""

    def __init__(self, cap: int):
        self.cap = max(1, cap)
        self.points: list[np.ndarray] = []
        self.values: list[np.ndarray] = []
        self._key_list: list[bytes] = []
        self._keys: set[bytes] = set()
        self.last_weights: Optional[np.ndarray] = None

    def add(self, p: np.ndarray, v: np.ndarray) -> None:
        key = p.tobytes()
        if key in self._keys:
            return
        if len(self.points) >= self.cap:
            self._evict()
        self._keys.add(key)
        self._key_list.append(key)
        self.points.append(p.copy())
        self.values.append(v.copy())
        self.last_weights = None

    def _evict(self) -> None:
        drop = 0
        if self.last_weights is not None and len(self.last_weights) == len(self.points):
            zeros = np.nonzero(self.last_weights <= 1e-15)[0]
            if zeros.size:
                drop = int(zeros[0])
        self._keys.discard(self._key_list.pop(drop))
        self.points.pop(drop)
        self.values.pop(drop)

    def arrays(self):
        return np.array(self.points), np.array(self.values)

    def __len__(self):
        return len(self.points)


def _minmax_weights(M: np.ndarray, max_pivots: int = 200):
    """min over the weight simplex of max_j (M w)_j, by primal simplex on
    the positive-shift game LP (maximize 1'z s.t. (M - min + 1) z <= 1).
    Returns the optimal weights or None if the pivot cap trips."""
    c, m = M.shape
    shift = float(M.min()) - 1.0
    tab = np.zeros((c + 1, m + c + 1))
    tab[:c, :m] = M - shift
    tab[:c, m:m + c] = np.eye(c)
    tab[:c, -1] = 1.0
    tab[c, :m] = -1.0
    basis = list(range(m, m + c))
    for _ in range(max_pivots):
        costs = tab[c, :m + c]
        neg = np.nonzero(costs < -1e-11)[0]
        if neg.size == 0:
            break
        enter = int(neg[0])  # Bland's rule, so no cycling
        col = tab[:c, enter]
        pos = np.nonzero(col > 1e-11)[0]
        if pos.size == 0:
            return None
        ratios = tab[pos, -1] / col[pos]
        cand = pos[ratios <= ratios.min() + 1e-14]
        leave = int(cand[np.argmin([basis[r] for r in cand])])
        tab[leave] /= tab[leave, enter]
        for r in range(c + 1):
            if r != leave and tab[r, enter] != 0.0:
                tab[r] -= tab[r, enter] * tab[leave]
        basis[leave] = enter
    else:
        return None
    z = np.zeros(m)
    for r, var in enumerate(basis):
        if var < m:
            z[var] = tab[r, -1]
    total = z.sum()
    if total <= 0.0:
        return None
    return np.maximum(z, 0.0) / total


def _lp_polish(pool: _AtomPool, body: ConvexBody, target: float,
               max_cuts: int):
    """Cutting-plane LP over the pooled atoms: minimize the certified gap
    over reweightings.  Returns (weights, certified_gap) or None."""
    pts, vals = pool.arrays()
    m = pts.shape[0]
    b_i = np.einsum("ij,ij->i", vals, pts)
    w = np.full(m, 1.0 / m)
    cuts: list[np.ndarray] = []
    cut_keys: set = set()
    best = None
    for _ in range(max_cuts):
        a = vals.T @ w
        ystar = body.linopt(-a)
        gap = float(a @ ystar) - float(b_i @ w)
        if best is None or gap < best[1]:
            best = (w.copy(), gap)
        if gap <= target:
            break
        key = ystar.tobytes()
        if key in cut_keys:
            break
        cut_keys.add(key)
        cuts.append(ystar)
        M = np.array([vals @ y - b_i for y in cuts])
        w = _minmax_weights(M)
        if w is None:
            # pivot cap, an off-path event; rebuild via the generic LP
            a_ub = np.hstack([M, -np.ones((len(cuts), 1))])
            c = np.zeros(m + 1)
            c[m] = 1.0
            a_eq = np.zeros((1, m + 1))
            a_eq[0, :m] = 1.0
            res = optimize.linprog(
                c, A_ub=a_ub, b_ub=np.zeros(len(cuts)), A_eq=a_eq, b_eq=[1.0],
                bounds=[(0.0, 1.0)] * m + [(None, None)], method="highs")
            if not res.success:
                break
            w = np.maximum(res.x[:m], 0.0)
            total = w.sum()
            if total <= 0.0:
                break
            w = w / total
    if best is None:
        return None
    return best


def solve_evi(problem: EviProblem, seed: int = 0,
              config: Optional[SolverConfig] = None) -> EviSolution:
    """Solve the EVI to the target error if the budget allows.

    Pure function of (problem, seed, config).  The returned certified gap
    is recomputed exactly on the returned atoms; ``hit_cap`` is set when
    it exceeds the target.
    """
    cfg = config or SolverConfig()
    body = problem.body
    op = _CheckedOperator(problem)
    target = problem.target_eps
    radius = body.outer_radius
    diam = body.diameter_bound
    k_needed = support_budget(problem.norm_bound, radius, target)
    pool = _AtomPool(min(cfg.pool_cap, k_needed))

    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 0x45564900)))
    start = body.sample(rng)

    best_single: Optional[tuple[np.ndarray, np.ndarray, float]] = None

    def consider_point(p: np.ndarray, v: np.ndarray):
        nonlocal best_single
        gap = float(v @ body.linopt(-v)) - float(v @ p)
        pool.add(p, v)
        if best_single is None or gap < best_single[2]:
            best_single = (p, v, gap)
        return gap

    # phase 1: best-response probes
    p = start
    for _ in range(max(1, cfg.br_probes)):
        v = op(p)
        gap = consider_point(p, v)
        if gap <= target:
            return _finish(problem, op, point_mass(body, p), target, k_needed)
        nxt = body.linopt(-v)
        if np.array_equal(nxt, p):
            break
        p = nxt

    # phase 2: self-play OGD with uniform-prefix certificates
    bound = max(problem.norm_bound, op.max_norm_seen, 1e-12)
    y = start
    iters = min(cfg.ogd_iters, k_needed)
    prefix_pts: list[np.ndarray] = []
    suma = np.zeros(body.dim)
    sumb = 0.0
    best_prefix: Optional[tuple[int, float]] = None
    for i in range(1, iters + 1):
        v = op(y)
        prefix_pts.append(y.copy())
        suma += v
        sumb += float(v @ y)
        pool.add(y, v)
        gap_prefix = (float(suma @ body.linopt(-suma)) - sumb) / i
        if best_prefix is None or gap_prefix < best_prefix[1]:
            best_prefix = (i, gap_prefix)
        if gap_prefix <= target:
            dist = uniform_over(body, np.array(prefix_pts[:i]))
            return _finish(problem, op, dist, target, k_needed)
        eta = diam / (bound * math.sqrt(i))
        y = body.project(y + eta * v)

    # phase 3: LP polish over the pool
    polished = _lp_polish(pool, body, target, cfg.lp_max_cuts)
    best_pool: Optional[tuple[np.ndarray, np.ndarray, np.ndarray, float]] = None
    if polished is not None:
        w, gap = polished
        pool.last_weights = w
        pts, vals = pool.arrays()
        best_pool = (pts, vals, w, gap)
        if gap <= target:
            return _finish_pool(problem, op, pts, vals, w, target, k_needed)

    # phase 4: step-decay refinement toward a mixed solution
    bound = max(problem.norm_bound, op.max_norm_seen, 1e-12)
    if best_single is not None and best_single[2] <= (
            best_prefix[1] if best_prefix else np.inf):
        y = best_single[0].copy()
    for level in range(1, cfg.refine_levels + 1):
        eta = diam / (bound * 2.0**level)
        for _ in range(cfg.refine_steps):
            v = op(y)
            gap = consider_point(y, v)
            if gap <= target:
                return _finish(problem, op, point_mass(body, y), target, k_needed)
            y = body.project(y + eta * v)
        run_lp = (level % cfg.lp_every_levels == 0) or level == cfg.refine_levels
        if run_lp:
            polished = _lp_polish(pool, body, target, cfg.lp_max_cuts)
            if polished is not None:
                w, gap = polished
                pool.last_weights = w
                pts, vals = pool.arrays()
                if best_pool is None or gap < best_pool[3]:
                    best_pool = (pts, vals, w, gap)
                if gap <= target:
                    return _finish_pool(problem, op, pts, vals, w, target, k_needed)

    # cap hit: return the best certified candidate
    candidates = []
    if best_single is not None:
        candidates.append((best_single[2], 0, "single"))
    if best_prefix is not None:
        candidates.append((best_prefix[1], 1, "prefix"))
    if best_pool is not None:
        candidates.append((best_pool[3], 2, "pool"))
    candidates.sort(key=lambda c: (c[0], c[1]))
    kind = candidates[0][2]
    if kind == "single":
        dist = point_mass(body, best_single[0])
        return _finish(problem, op, dist, target, k_needed)
    if kind == "prefix":
        dist = uniform_over(body, np.array(prefix_pts[:best_prefix[0]]))
        return _finish(problem, op, dist, target, k_needed)
    pts, vals, w, _ = best_pool
    return _finish_pool(problem, op, pts, vals, w, target, k_needed)


def _finish_pool(problem, op, pts, vals, w, target, k_needed) -> EviSolution:
    keep = w > 1e-15
    if not np.any(keep):
        keep = w == w.max()
    w_kept = w[keep]
    dist = FiniteSupportDistribution(problem.body, pts[keep], w_kept / w_kept.sum())
    return _finish(problem, op, dist, target, k_needed)


def _finish(problem, op: _CheckedOperator, dist: FiniteSupportDistribution,
            target: float, k_needed: int) -> EviSolution:
    dist = dist.coalesced(tol=1e-12)
    if dist.support_size > k_needed:
        # degenerate easy-target case; a point mass always fits the budget
        idx = int(np.argmax(dist.weights))
        dist = point_mass(problem.body, dist.points[idx])
    vals = np.array([op(p) for p in dist.points])
    gap = certify_evi(dist, problem.operator, op_values=vals)
    return EviSolution(dist=dist, certified_gap=gap, target_eps=target,
                       op_evals=op.evals, hit_cap=gap > target,
                       atom_op_values=vals)
