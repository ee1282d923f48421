"""Convex bodies, their oracles, and finite-support distributions.

Five body kinds are supported: probability simplex, axis-aligned box,
Euclidean ball, convex hull of an explicit vertex list, and a Frobenius
ball over matrices (flattened row-major, so it behaves as a Euclidean
ball with matrix metadata).

Each body exposes membership testing, Euclidean projection, linear
optimization with a documented deterministic tie-break, and seeded
sampling.  Determinism matters: downstream maps of the form
``argmin over the body`` must be genuine functions of their inputs, so
ties are always broken the same way (lowest index, or lower bound).

Membership uses an absolute tolerance of 1e-9 scaled by the body's outer
radius.  Distribution weights must sum to one within 1e-12.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ContractError

MEMBERSHIP_TOL = 1e-9
WEIGHT_TOL = 1e-12


def as_vector(v, dim: Optional[int] = None, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=float)
    if arr.ndim != 1:
        raise ContractError(f"{name} must be 1-d, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise ContractError(f"{name} has dim {arr.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class ConvexBody:
    """Immutable convex body; construct via the factory functions below."""

    kind: str
    dim: int
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None
    center: Optional[np.ndarray] = None
    radius: Optional[float] = None
    points: Optional[np.ndarray] = None
    rows: Optional[int] = None
    cols: Optional[int] = None

    # ------------------------------------------------------------------
    @property
    def outer_radius(self) -> float:
        """Radius of the smallest origin-centered ball containing the body.

        For polytopes this is the max vertex norm; for balls it is
        ||center|| + radius.  An inner radius is deliberately not exposed:
        nothing downstream needs one, and for lopsided vertex lists it has
        no cheap exact formula.
        """
        if self.kind == "simplex":
            return 1.0
        if self.kind == "box":
            return float(np.linalg.norm(np.maximum(np.abs(self.lo), np.abs(self.hi))))
        if self.kind in ("euclidean_ball", "frobenius_ball"):
            return float(np.linalg.norm(self.center) + self.radius)
        if self.kind == "vertex_polytope":
            return float(np.max(np.linalg.norm(self.points, axis=1)))
        raise ContractError(f"unknown body kind {self.kind!r}")

    @property
    def diameter_bound(self) -> float:
        return 2.0 * self.outer_radius

    def membership_tol(self, tol: float = MEMBERSHIP_TOL) -> float:
        return tol * max(1.0, self.outer_radius)

    # ------------------------------------------------------------------
    def contains(self, z, tol: float = MEMBERSHIP_TOL) -> bool:
        z = as_vector(z, self.dim, "point")
        eps = self.membership_tol(tol)
        if self.kind == "simplex":
            return bool(np.all(z >= -eps) and abs(z.sum() - 1.0) <= eps)
        if self.kind == "box":
            return bool(np.all(z >= self.lo - eps) and np.all(z <= self.hi + eps))
        if self.kind in ("euclidean_ball", "frobenius_ball"):
            return bool(np.linalg.norm(z - self.center) <= self.radius + eps)
        if self.kind == "vertex_polytope":
            return bool(np.linalg.norm(z - self.project(z)) <= eps)
        raise ContractError(f"unknown body kind {self.kind!r}")

    # ------------------------------------------------------------------
    def linopt(self, c) -> np.ndarray:
        """Minimizer of <c, z> over the body.

        Tie-breaks: simplex and vertex lists take the lowest-index
        minimizing vertex; boxes decide per coordinate by the sign of c
        with the lower bound on ties; balls return the center when c = 0.
        """
        c = as_vector(c, self.dim, "direction")
        if self.kind == "simplex":
            out = np.zeros(self.dim)
            out[int(np.argmin(c))] = 1.0
            return out
        if self.kind == "box":
            return self._box_linopt(c)
        if self.kind in ("euclidean_ball", "frobenius_ball"):
            norm = float(np.linalg.norm(c))
            if norm == 0.0:
                return self.center.copy()
            return self.center - self.radius * (c / norm)
        if self.kind == "vertex_polytope":
            scores = self.points @ c
            return self.points[int(np.argmin(scores))].copy()
        raise ContractError(f"unknown body kind {self.kind!r}")

    def _box_linopt(self, c: np.ndarray) -> np.ndarray:
        # sign rule per coordinate; c == 0 keeps the lower bound
        out = np.where(c > 0.0, self.lo, self.hi)
        out = np.where(c == 0.0, self.lo, out)
        return out.astype(float)

    # ------------------------------------------------------------------
    def project(self, v) -> np.ndarray:
        """Euclidean projection onto the body."""
        v = as_vector(v, self.dim, "point")
        if self.kind == "simplex":
            return _project_simplex(v)
        if self.kind == "box":
            return np.clip(v, self.lo, self.hi)
        if self.kind in ("euclidean_ball", "frobenius_ball"):
            delta = v - self.center
            norm = float(np.linalg.norm(delta))
            if norm <= self.radius:
                return v.copy()
            return self.center + delta * (self.radius / norm)
        if self.kind == "vertex_polytope":
            w = _project_hull_weights(self.points, v)
            return self.points.T @ w
        raise ContractError(f"unknown body kind {self.kind!r}")

    # ------------------------------------------------------------------
    def vertices(self) -> np.ndarray:
        """Vertex list for polytopal kinds; error for balls."""
        if self.kind == "simplex":
            return np.eye(self.dim)
        if self.kind == "box":
            if self.dim > 16:
                raise ContractError("box vertex enumeration limited to dim <= 16")
            cols = [(float(l), float(h)) for l, h in zip(self.lo, self.hi)]
            return np.array(list(itertools.product(*cols)), dtype=float)
        if self.kind == "vertex_polytope":
            return self.points.copy()
        raise ContractError(f"{self.kind} has no vertex list")

    @property
    def is_polytope(self) -> bool:
        return self.kind in ("simplex", "box", "vertex_polytope")

    # ------------------------------------------------------------------
    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """A random member; used only for seeded initialization."""
        if self.kind == "simplex":
            return rng.dirichlet(np.ones(self.dim))
        if self.kind == "box":
            return rng.uniform(self.lo, self.hi)
        if self.kind in ("euclidean_ball", "frobenius_ball"):
            direction = rng.normal(size=self.dim)
            norm = float(np.linalg.norm(direction))
            if norm == 0.0:
                return self.center.copy()
            r = self.radius * rng.uniform() ** (1.0 / self.dim)
            return self.center + direction * (r / norm)
        if self.kind == "vertex_polytope":
            w = rng.dirichlet(np.ones(self.points.shape[0]))
            return self.points.T @ w
        raise ContractError(f"unknown body kind {self.kind!r}")

    # ------------------------------------------------------------------
    def spec(self) -> dict:
        """JSON-able description; inverse of body_from_spec."""
        if self.kind == "simplex":
            return {"kind": "simplex", "dim": self.dim}
        if self.kind == "box":
            return {"kind": "box", "lo": self.lo.tolist(), "hi": self.hi.tolist()}
        if self.kind == "euclidean_ball":
            return {"kind": "euclidean_ball", "center": self.center.tolist(),
                    "radius": self.radius}
        if self.kind == "frobenius_ball":
            return {"kind": "frobenius_ball", "rows": self.rows, "cols": self.cols,
                    "radius": self.radius}
        if self.kind == "vertex_polytope":
            return {"kind": "vertex_polytope", "points": self.points.tolist()}
        raise ContractError(f"unknown body kind {self.kind!r}")


# ----------------------------------------------------------------------
# factories

def simplex(dim: int) -> ConvexBody:
    if dim < 1:
        raise ContractError("simplex needs dim >= 1")
    return ConvexBody(kind="simplex", dim=int(dim))


def box(lo, hi) -> ConvexBody:
    lo = as_vector(lo, name="lo")
    hi = as_vector(hi, dim=lo.shape[0], name="hi")
    if np.any(hi < lo):
        raise ContractError("box needs hi >= lo coordinatewise")
    lo.setflags(write=False)
    hi.setflags(write=False)
    return ConvexBody(kind="box", dim=lo.shape[0], lo=lo, hi=hi)


def euclidean_ball(center, radius: float) -> ConvexBody:
    center = as_vector(center, name="center")
    if not np.isfinite(radius) or radius < 0:
        raise ContractError("ball radius must be finite and >= 0")
    center.setflags(write=False)
    return ConvexBody(kind="euclidean_ball", dim=center.shape[0],
                      center=center, radius=float(radius))


def vertex_polytope(points) -> ConvexBody:
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 1:
        raise ContractError("vertex_polytope needs a nonempty (k, d) array")
    if not np.all(np.isfinite(pts)):
        raise ContractError("vertex_polytope points must be finite")
    pts.setflags(write=False)
    return ConvexBody(kind="vertex_polytope", dim=pts.shape[1], points=pts)


def frobenius_ball(rows: int, cols: int, radius: float) -> ConvexBody:
    if rows < 1 or cols < 1:
        raise ContractError("frobenius_ball needs rows, cols >= 1")
    if not np.isfinite(radius) or radius < 0:
        raise ContractError("frobenius_ball radius must be finite and >= 0")
    dim = int(rows) * int(cols)
    center = np.zeros(dim)
    center.setflags(write=False)
    return ConvexBody(kind="frobenius_ball", dim=dim, center=center,
                      radius=float(radius), rows=int(rows), cols=int(cols))


def body_from_spec(spec: dict) -> ConvexBody:
    kind = spec.get("kind")
    if kind == "simplex":
        return simplex(spec["dim"])
    if kind == "box":
        return box(spec["lo"], spec["hi"])
    if kind == "euclidean_ball":
        return euclidean_ball(spec["center"], spec["radius"])
    if kind == "frobenius_ball":
        return frobenius_ball(spec["rows"], spec["cols"], spec["radius"])
    if kind == "vertex_polytope":
        return vertex_polytope(spec["points"])
    raise ContractError(f"unknown body kind {kind!r}")


# ----------------------------------------------------------------------
# projection internals

def _project_simplex(v: np.ndarray) -> np.ndarray:
    """Sorted-threshold projection.  Exact, O(d log d)."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, v.shape[0] + 1)
    cond = u - css / idx > 0.0
    rho = int(np.nonzero(cond)[0][-1]) + 1
    tau = css[rho - 1] / rho
    return np.maximum(v - tau, 0.0)


def _project_hull_weights(points: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Weights of the projection of v onto conv(points).

    Accelerated projected gradient on the weight simplex supplies a
    support guess; an active-set pass then solves the equality-constrained
    least squares exactly on that support and certifies optimality via the
    variational inequality over all vertices.  Deterministic throughout.
    """
    k = points.shape[0]
    if k == 1:
        return np.ones(1)
    gram = points @ points.T
    lip = float(np.max(np.linalg.eigvalsh(gram)))
    scale = max(1.0, float(np.linalg.norm(v)), float(np.max(np.abs(points))))
    if lip <= 0.0:
        return np.full(k, 1.0 / k)
    pv = points @ v
    w = np.full(k, 1.0 / k)
    z = w.copy()
    t_acc = 1.0
    for _ in range(1500):
        grad = gram @ z - pv
        w_next = _project_simplex(z - grad / lip)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_acc * t_acc))
        z = w_next + ((t_acc - 1.0) / t_next) * (w_next - w)
        move = float(np.linalg.norm(w_next - w))
        w = w_next
        t_acc = t_next
        if move <= 1e-15 * (1.0 + float(np.linalg.norm(w))):
            break
    refined = _active_set_refine(points, v, w, scale)
    if refined is not None:
        return refined
    return w


def _active_set_refine(points, v, w0, scale):
    """Exact least squares on the active support, growing or shrinking the
    support until the hull variational inequality certifies optimality."""
    k = points.shape[0]
    active = set(np.nonzero(w0 > 1e-9)[0].tolist()) or {int(np.argmax(w0))}
    for _ in range(3 * k + 10):
        idx = sorted(active)
        sub = points[idx]
        kk = len(idx)
        # KKT system for min ||sub^T w - v||^2 subject to sum(w) = 1
        lhs = np.zeros((kk + 1, kk + 1))
        lhs[:kk, :kk] = sub @ sub.T
        lhs[:kk, kk] = 1.0
        lhs[kk, :kk] = 1.0
        rhs = np.concatenate([sub @ v, [1.0]])
        sol, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
        w_act = sol[:kk]
        if np.min(w_act) < -1e-12:
            active.discard(idx[int(np.argmin(w_act))])
            if not active:
                return None
            continue
        w_full = np.zeros(k)
        w_full[idx] = np.maximum(w_act, 0.0)
        total = w_full.sum()
        if total <= 0.0:
            return None
        w_full /= total
        proj = points.T @ w_full
        resid = v - proj
        viol = points @ resid - float(proj @ resid)
        worst = int(np.argmax(viol))
        if viol[worst] <= 1e-12 * scale * scale:
            return w_full
        if worst in active:
            return w_full  # numerically stalled; current point is optimal within tol
        active.add(worst)
    return None


# ----------------------------------------------------------------------
# module-level oracle functions (same contracts as the methods)

def linopt(bdy: ConvexBody, c) -> np.ndarray:
    return bdy.linopt(c)


def project(bdy: ConvexBody, v) -> np.ndarray:
    return bdy.project(v)


# ----------------------------------------------------------------------
# finite-support distributions

@dataclass(frozen=True)
class FiniteSupportDistribution:
    """Finitely many weighted atoms inside a declared body.

    Atom order is part of the value: expectations are summed in declared
    order so replays are bitwise stable.
    """

    body: ConvexBody
    points: np.ndarray   # (m, dim)
    weights: np.ndarray  # (m,)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        wts = np.asarray(self.weights, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != self.body.dim:
            raise ContractError(f"atoms must be (m, {self.body.dim}), got {pts.shape}")
        if wts.ndim != 1 or wts.shape[0] != pts.shape[0]:
            raise ContractError("weights must align with atoms")
        if pts.shape[0] == 0:
            raise ContractError("distribution needs at least one atom")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(wts))):
            raise ContractError("atoms and weights must be finite")
        if np.any(wts < -WEIGHT_TOL):
            raise ContractError("weights must be nonnegative")
        if abs(float(wts.sum()) - 1.0) > WEIGHT_TOL:
            raise ContractError(f"weights sum to {wts.sum()!r}, not 1 within {WEIGHT_TOL}")
        for i in range(pts.shape[0]):
            if not self.body.contains(pts[i]):
                raise ContractError(f"atom {i} lies outside the declared body")
        pts.setflags(write=False)
        wts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", wts)

    @property
    def support_size(self) -> int:
        return int(self.points.shape[0])

    def mean(self) -> np.ndarray:
        return self.points.T @ self.weights

    def expect(self, f: Callable[[np.ndarray], np.ndarray]):
        """Sum_i w_i f(p_i), accumulated in declared atom order."""
        total = None
        for i in range(self.support_size):
            val = np.asarray(f(self.points[i]), dtype=float) * self.weights[i]
            total = val if total is None else total + val
        return total

    def coalesced(self, tol: float = 1e-12) -> "FiniteSupportDistribution":
        """Merge atoms equal within tol (first occurrence wins the slot)."""
        keep_pts, keep_wts = [], []
        for i in range(self.support_size):
            placed = False
            for j, q in enumerate(keep_pts):
                if np.all(np.abs(q - self.points[i]) <= tol):
                    keep_wts[j] += self.weights[i]
                    placed = True
                    break
            if not placed:
                keep_pts.append(self.points[i])
                keep_wts.append(float(self.weights[i]))
        w = np.array(keep_wts)
        w = w / w.sum()
        return FiniteSupportDistribution(self.body, np.array(keep_pts), w)

    def atoms_jsonable(self) -> list:
        return [[self.points[i].tolist(), float(self.weights[i])]
                for i in range(self.support_size)]


def point_mass(bdy: ConvexBody, p) -> FiniteSupportDistribution:
    p = as_vector(p, bdy.dim, "point")
    return FiniteSupportDistribution(bdy, p[None, :], np.ones(1))


def uniform_over(bdy: ConvexBody, pts) -> FiniteSupportDistribution:
    pts = np.asarray(pts, dtype=float)
    m = pts.shape[0]
    return FiniteSupportDistribution(bdy, pts, np.full(m, 1.0 / m))


def mixture(dists, coeffs) -> FiniteSupportDistribution:
    """Convex combination of distributions over a common body."""
    coeffs = as_vector(coeffs, name="coefficients")
    if len(dists) != coeffs.shape[0]:
        raise ContractError("mixture needs one coefficient per distribution")
    if np.any(coeffs < 0) or abs(coeffs.sum() - 1.0) > 1e-9:
        raise ContractError("mixture coefficients must be a probability vector")
    bdy = dists[0].body
    pts = np.concatenate([d.points for d in dists], axis=0)
    wts = np.concatenate([c * d.weights for c, d in zip(coeffs, dists)])
    wts = wts / wts.sum()
    return FiniteSupportDistribution(bdy, pts, wts)


def atoms_from_jsonable(bdy: ConvexBody, atoms: list) -> FiniteSupportDistribution:
    pts = np.array([a[0] for a in atoms], dtype=float)
    wts = np.array([a[1] for a in atoms], dtype=float)
    return FiniteSupportDistribution(bdy, pts, wts)


def expect(dist: FiniteSupportDistribution, f: Callable[[np.ndarray], np.ndarray]):
    return dist.expect(f)
