"""Test functions, feature maps, and matrix-valued kernels.

A test function maps (context, forecast) to a vector in forecast space;
calibration error accumulates h(x_t, p)^T (y_t - p).  Families come in
three shapes: explicit finite lists, linear families h = Psi^T theta
over a feature map Psi(x, p) in R^{r x d}, and RKHS balls of a
matrix-valued kernel Gamma((x,p),(x',p')) in R^{d x d}.

Conventions used throughout:
* scalar feature vectors psi in R^m lift to matrix maps via
  Psi = kron(I_d, psi), so Psi^T theta = M psi with M = theta reshaped
  (d, m) row-major, and Psi^T Psi' = (psi . psi') I_d;
* kernels are either scalar k times identity, factorized Psi^T Psi',
  or sums of those; all are symmetric (Gamma(u,v) = Gamma(v,u)^T) and
  positive semidefinite by construction.

KernelHistory is the append-only state of a defensive forecaster: it
absorbs one round (context, forecast atoms, weights, outcome) at a time
and serves the induced operator

    S_t(p) = sum_{i<t} E_{q ~ D_i} [ Gamma((x_t,p),(x_i,q)) (y_i - q) ]

in vectorized form, together with the per-round quantities the norm
recursion needs.
"""

from __future__ import annotations

import csv
import dataclasses
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError


@dataclass(frozen=True, eq=False)
class TestFunction:
    """Named map (x, p) -> R^d with a declared sup norm bound.

    fn_batch, when set, evaluates a whole (m, d) block of forecasts at
    once; aff_mat/aff_off declare a context-free affine form
    h(x, p) = aff_mat @ p + aff_off, which mixtures and audits exploit.
    """

    __test__ = False  # not a pytest class

    name: str
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    bound: float
    dim: int
    fn_batch: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    aff_mat: Optional[np.ndarray] = None
    aff_off: Optional[np.ndarray] = None

    def __call__(self, x: np.ndarray, p: np.ndarray) -> np.ndarray:
        out = np.asarray(self.fn(x, p), dtype=float)
        if out.shape != (self.dim,):
            raise ContractError(
                f"test function {self.name!r} returned shape {out.shape}")
        return out


def values_of(h: TestFunction, x: np.ndarray, points: np.ndarray) -> np.ndarray:
    """h at each row of points, shape (m, d); fastest available path."""
    points = np.asarray(points, dtype=float)
    if h.aff_mat is not None:
        return points @ h.aff_mat.T + h.aff_off[None, :]
    if h.fn_batch is not None:
        out = np.asarray(h.fn_batch(x, points), dtype=float)
        if out.shape != points.shape:
            raise ContractError(
                f"batch evaluation of {h.name!r} returned {out.shape}")
        return out
    return np.array([h(x, p) for p in points])


def negate(h: TestFunction) -> TestFunction:
    return TestFunction(
        name=f"-{h.name}", fn=lambda x, p: -h(x, p), bound=h.bound, dim=h.dim,
        fn_batch=None if h.fn_batch is None else (lambda x, P: -h.fn_batch(x, P)),
        aff_mat=None if h.aff_mat is None else -h.aff_mat,
        aff_off=None if h.aff_off is None else -h.aff_off)


def close_under_negation(funcs: Sequence[TestFunction]) -> list[TestFunction]:
    """Family plus the negation of each member, so that signed calibration
    error bounds both tails without absolute values."""
    return list(funcs) + [negate(h) for h in funcs]


def affine_test(name: str, mat: np.ndarray, off: np.ndarray,
                outer_radius: float = 1.0) -> TestFunction:
    """Context-free affine member h(x, p) = mat @ p + off with the spectral
    bound valid on any body inside the given outer radius."""
    mat = np.asarray(mat, dtype=float)
    off = np.asarray(off, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1] or off.shape != (mat.shape[0],):
        raise ContractError("affine member needs a square matrix and matching offset")
    bound = float(np.linalg.norm(mat, 2)) * outer_radius + float(np.linalg.norm(off))
    return TestFunction(name=name, fn=lambda x, p: mat @ p + off,
                        bound=bound, dim=mat.shape[0],
                        aff_mat=mat, aff_off=off)


def finite_family_mix(funcs: Sequence[TestFunction],
                      weights: np.ndarray) -> TestFunction:
    """Convex mixture of a finite family; the induced loss is linear in the
    mixing weights, so playing the mixture equals playing the distribution.
    All-affine families collapse to a single affine map."""
    weights = np.asarray(weights, dtype=float)
    if len(funcs) != weights.shape[0]:
        raise ContractError("one weight per member required")
    if abs(float(weights.sum()) - 1.0) > 1e-9 or np.any(weights < -1e-15):
        raise ContractError("weights must be a probability vector")
    dim = funcs[0].dim
    bound = max(h.bound for h in funcs)

    if all(h.aff_mat is not None for h in funcs):
        mat = np.zeros((dim, dim))
        off = np.zeros(dim)
        for w, h in zip(weights, funcs):
            if w != 0.0:
                mat += w * h.aff_mat
                off += w * h.aff_off
        return TestFunction(name="mix", fn=lambda x, p: mat @ p + off,
                            bound=bound, dim=dim, aff_mat=mat, aff_off=off)

    def fn(x, p):
        acc = np.zeros(dim)
        for w, h in zip(weights, funcs):
            if w != 0.0:
                acc += w * h(x, p)
        return acc

    def fn_batch(x, P):
        acc = np.zeros_like(np.asarray(P, dtype=float))
        for w, h in zip(weights, funcs):
            if w != 0.0:
                acc += w * values_of(h, x, P)
        return acc

    return TestFunction(name="mix", fn=fn, fn_batch=fn_batch, bound=bound, dim=dim)


# -- feature maps -------------------------------------------------------------

@dataclass(frozen=True)
class FeatureMap:
    """Map (x, p) -> R^{rows x d}; theta in R^rows induces h = Psi^T theta.

    bound dominates the spectral norm of Psi everywhere, so
    ||Psi^T theta|| <= bound * ||theta||.
    """

    name: str
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    rows: int
    dim: int
    bound: float

    def __call__(self, x: np.ndarray, p: np.ndarray) -> np.ndarray:
        out = np.asarray(self.fn(x, p), dtype=float)
        if out.shape != (self.rows, self.dim):
            raise ContractError(
                f"feature map {self.name!r} returned shape {out.shape}")
        return out


def linear_test(fmap: FeatureMap, theta: np.ndarray,
                name: Optional[str] = None) -> TestFunction:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (fmap.rows,):
        raise ContractError("theta must match feature rows")
    return TestFunction(
        name=name or f"{fmap.name}@theta",
        fn=lambda x, p: fmap(x, p).T @ theta,
        bound=fmap.bound * float(np.linalg.norm(theta)),
        dim=fmap.dim)


def scalar_lift(name: str, scalar_fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
                n_scalars: int, dim: int, scalar_bound: float) -> FeatureMap:
    """Lift scalar features psi in R^m to Psi = kron(I_d, psi), whose
    spectral norm is exactly ||psi||."""

    def fn(x, p):
        psi = np.asarray(scalar_fn(x, p), dtype=float)
        if psi.shape != (n_scalars,):
            raise ContractError(f"scalar features returned shape {psi.shape}")
        return np.kron(np.eye(dim), psi.reshape(-1, 1))

    return FeatureMap(name=name, fn=fn, rows=n_scalars * dim, dim=dim,
                      bound=scalar_bound)


def monomial_count(n_vars: int, degree: int) -> int:
    return math.comb(n_vars + degree, degree)


def monomial_exponents(n_vars: int, degree: int) -> list[tuple[int, ...]]:
    """All exponent tuples of total degree <= degree, graded lexicographic."""
    out = []
    for total in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(n_vars), total):
            e = [0] * n_vars
            for idx in combo:
                e[idx] += 1
            out.append(tuple(e))
    return out


def monomial_feature_map(context_dim: int, dim: int, degree: int,
                         input_bound: float = 1.0) -> FeatureMap:
    """Monomials of total degree <= degree in the concatenated (x, p)
    coordinates, lifted to a matrix map.  input_bound dominates every
    coordinate magnitude of the concatenated input."""
    n_vars = context_dim + dim
    exps = monomial_exponents(n_vars, degree)
    exp_mat = np.array(exps, dtype=float)  # (m, n_vars)
    m = len(exps)
    coord_cap = max(1.0, input_bound)
    scalar_bound = math.sqrt(m) * coord_cap**degree

    def scalar_fn(x, p):
        z = np.concatenate([np.atleast_1d(np.asarray(x, dtype=float)).ravel(),
                            np.asarray(p, dtype=float)])
        # prod over variables of z_j^{e_j}; 0^0 = 1 handled by where
        with np.errstate(divide="ignore", invalid="ignore"):
            powed = np.where(exp_mat == 0, 1.0,
                             np.sign(z)**exp_mat * np.abs(z)**exp_mat)
        return np.prod(powed, axis=1)

    return scalar_lift(f"monomials<= {degree}", scalar_fn, m, dim, scalar_bound)


# -- matrix kernels -----------------------------------------------------------

@dataclass(frozen=True)
class MatrixKernel:
    """Matrix-valued PSD kernel on (context, forecast) pairs.

    kind "scalar": Gamma = k(z, z') I_d for z = concat(x, p), with
    scalar_kind one of linear / poly / gaussian.  kind "feature":
    Gamma = Psi(u)^T Psi(u').  kind "sum": direct sum of parts.
    input_bound dominates ||z|| and is used only for value bounds.
    """

    kind: str
    dim: int
    scalar_kind: str = ""
    c0: float = 0.0
    power: int = 1
    bandwidth: float = 1.0
    feature: Optional[FeatureMap] = None
    parts: tuple = ()
    input_bound: float = 1.0
    pre: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None

    def warp_point(self, x: np.ndarray, p: np.ndarray) -> np.ndarray:
        """Forecast coordinate fed to the kernel; scalar kinds may warp it."""
        if self.pre is None:
            return np.asarray(p, dtype=float)
        return np.asarray(self.pre(x, p), dtype=float)

    def scalar_vec(self, z: np.ndarray, zs: np.ndarray) -> np.ndarray:
        """k(z, row) over the rows of zs; scalar kinds only."""
        if self.kind != "scalar":
            raise ContractError("scalar_vec requires a scalar kernel")
        if zs.size == 0:
            return np.zeros(0)
        if self.scalar_kind == "linear":
            return zs @ z + self.c0
        if self.scalar_kind == "poly":
            return (zs @ z + self.c0) ** self.power
        if self.scalar_kind == "gaussian":
            d2 = np.sum((zs - z) ** 2, axis=1)
            return np.exp(-d2 / (2.0 * self.bandwidth**2))
        raise ContractError(f"unknown scalar kind {self.scalar_kind!r}")

    def scalar_gram(self, za: np.ndarray, zb: np.ndarray) -> np.ndarray:
        if self.kind != "scalar":
            raise ContractError("scalar_gram requires a scalar kernel")
        if self.scalar_kind == "linear":
            return za @ zb.T + self.c0
        if self.scalar_kind == "poly":
            return (za @ zb.T + self.c0) ** self.power
        if self.scalar_kind == "gaussian":
            d2 = (np.sum(za**2, axis=1)[:, None] + np.sum(zb**2, axis=1)[None, :]
                  - 2.0 * za @ zb.T)
            return np.exp(-np.maximum(d2, 0.0) / (2.0 * self.bandwidth**2))
        raise ContractError(f"unknown scalar kind {self.scalar_kind!r}")

    def eval(self, x: np.ndarray, p: np.ndarray,
             x2: np.ndarray, p2: np.ndarray) -> np.ndarray:
        """Gamma((x,p),(x2,p2)) as a (d, d) matrix."""
        if self.kind == "scalar":
            z = _concat(x, self.warp_point(x, p))
            z2 = _concat(x2, self.warp_point(x2, p2))
            return float(self.scalar_vec(z2, z.reshape(1, -1))[0]) * np.eye(self.dim)
        if self.kind == "feature":
            return self.feature(x, p).T @ self.feature(x2, p2)
        if self.kind == "sum":
            return sum(part.eval(x, p, x2, p2) for part in self.parts)
        raise ContractError(f"unknown kernel kind {self.kind!r}")

    def value_bound(self) -> float:
        """Dominates the spectral norm of Gamma everywhere on the domain."""
        if self.kind == "scalar":
            if self.scalar_kind == "gaussian":
                return 1.0
            base = self.input_bound**2 + abs(self.c0)
            if self.scalar_kind == "linear":
                return base
            return base**self.power
        if self.kind == "feature":
            return self.feature.bound**2
        return sum(part.value_bound() for part in self.parts)

    def make_history(self, context_dim: int) -> "KernelHistory":
        if self.kind == "sum":
            return _SumHistory(self, context_dim)
        if self.kind == "feature":
            return _FeatureHistory(self, context_dim)
        return _ScalarHistory(self, context_dim)


def _concat(x: np.ndarray, p: np.ndarray) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
    return np.concatenate([x, np.asarray(p, dtype=float)])


def linear_kernel(dim: int, c0: float = 0.0, input_bound: float = 1.0) -> MatrixKernel:
    return MatrixKernel(kind="scalar", dim=dim, scalar_kind="linear", c0=c0,
                        input_bound=input_bound)


def polynomial_kernel(dim: int, power: int, c0: float = 1.0,
                      input_bound: float = 1.0) -> MatrixKernel:
    if power < 1:
        raise ContractError("power must be >= 1")
    return MatrixKernel(kind="scalar", dim=dim, scalar_kind="poly", c0=c0,
                        power=power, input_bound=input_bound)


def gaussian_kernel(dim: int, bandwidth: float, input_bound: float = 1.0) -> MatrixKernel:
    if bandwidth <= 0:
        raise ContractError("bandwidth must be positive")
    return MatrixKernel(kind="scalar", dim=dim, scalar_kind="gaussian",
                        bandwidth=bandwidth, input_bound=input_bound)


def feature_kernel(fmap: FeatureMap) -> MatrixKernel:
    return MatrixKernel(kind="feature", dim=fmap.dim, feature=fmap)


def kernel_sum(*parts: MatrixKernel) -> MatrixKernel:
    if not parts:
        raise ContractError("kernel_sum needs at least one part")
    dim = parts[0].dim
    if any(p.dim != dim for p in parts):
        raise ContractError("kernel parts must share the output dimension")
    return MatrixKernel(kind="sum", dim=dim, parts=tuple(parts))


def warp_kernel(kernel: MatrixKernel,
                pre: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> MatrixKernel:
    """The kernel evaluated at (x, pre(x, p)) instead of (x, p).

    The warp must keep the input dimension and stay inside the domain the
    kernel's input_bound was declared for.  Scalar kinds carry the warp as
    a field; feature maps absorb it into their function; sums recurse.
    """
    if kernel.kind == "sum":
        return kernel_sum(*(warp_kernel(q, pre) for q in kernel.parts))
    if kernel.kind == "feature":
        f = kernel.feature
        wrapped = FeatureMap(name=f"{f.name}|warped", rows=f.rows, dim=f.dim,
                             bound=f.bound, fn=lambda x, p: f(x, pre(x, p)))
        return feature_kernel(wrapped)
    if kernel.pre is not None:
        inner = kernel.pre
        composed = lambda x, p: inner(x, pre(x, p))
    else:
        composed = pre
    return dataclasses.replace(kernel, pre=composed)


# -- defensive-forecasting history --------------------------------------------

class KernelHistory:
    """Append-only record of (context, atoms, weights, outcome) rounds.

    absorb() folds one round in and returns (cross_t, w_t):
      cross_t = E_{p ~ D_t} [ S_t(p)^T (y_t - p) ]   (pre-update operator)
      w_t     = E_{p, p' ~ D_t} [ (y_t-p)^T Gamma((x_t,p),(x_t,p')) (y_t-p') ]
    so that the squared RKHS norm of the running sum obeys
    norm2 += 2 * cross_t + w_t.  operator(x) serves S at the current state;
    operator_bound() dominates ||S(p)|| on the body.
    """

    def __init__(self, kernel: MatrixKernel, context_dim: int):
        self.kernel = kernel
        self.context_dim = context_dim
        self.rounds = 0

    def operator(self, x: np.ndarray) -> Callable[[np.ndarray], np.ndarray]:
        raise NotImplementedError

    def absorb(self, x, points, weights, y) -> tuple[float, float]:
        raise NotImplementedError

    def operator_bound(self) -> float:
        raise NotImplementedError


class _ScalarHistory(KernelHistory):
    def __init__(self, kernel, context_dim):
        super().__init__(kernel, context_dim)
        self._z_blocks: list[np.ndarray] = []
        self._r_blocks: list[np.ndarray] = []
        self._stack: Optional[tuple[np.ndarray, np.ndarray]] = None
        self._residual_mass = 0.0

    def _stacked(self):
        if self._stack is None:
            if self._z_blocks:
                self._stack = (np.vstack(self._z_blocks), np.vstack(self._r_blocks))
            else:
                zdim = self.context_dim + self.kernel.dim
                self._stack = (np.zeros((0, zdim)), np.zeros((0, self.kernel.dim)))
        return self._stack

    def operator(self, x):
        zs, rs = self._stacked()
        x = np.atleast_1d(np.asarray(x, dtype=float)).ravel()

        def op(p):
            if zs.shape[0] == 0:
                return np.zeros(self.kernel.dim)
            z = np.concatenate([x, self.kernel.warp_point(x, p)])
            return self.kernel.scalar_vec(z, zs) @ rs

        return op

    def absorb(self, x, points, weights, y):
        points = np.asarray(points, dtype=float)
        weights = np.asarray(weights, dtype=float)
        y = np.asarray(y, dtype=float)
        x = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
        if self.kernel.pre is None:
            warped = points
        else:
            warped = np.array([self.kernel.warp_point(x, p) for p in points])
        z_new = np.hstack([np.tile(x, (points.shape[0], 1)), warped])
        r_new = weights[:, None] * (y[None, :] - points)
        zs, rs = self._stacked()
        if zs.shape[0]:
            k_cross = self.kernel.scalar_gram(z_new, zs)  # (m, N)
            cross = float(np.sum((k_cross @ rs) * r_new))
        else:
            cross = 0.0
        gram = self.kernel.scalar_gram(z_new, z_new)
        w_t = float(np.sum(gram * (r_new @ r_new.T)))
        self._z_blocks.append(z_new)
        self._r_blocks.append(r_new)
        self._stack = None
        self._residual_mass += float(weights @ np.linalg.norm(y[None, :] - points, axis=1))
        self.rounds += 1
        return cross, w_t

    def operator_bound(self):
        return self.kernel.value_bound() * self._residual_mass


class _FeatureHistory(KernelHistory):
    """Factorized kernels admit O(1) state: the running feature-space sum
    g = sum_i E[Psi(x_i, p)(y_i - p)], with S_t(p) = Psi(x_t, p)^T g."""

    def __init__(self, kernel, context_dim):
        super().__init__(kernel, context_dim)
        self.g = np.zeros(kernel.feature.rows)

    def operator(self, x):
        fmap = self.kernel.feature
        g = self.g.copy()

        def op(p):
            return fmap(x, p).T @ g

        return op

    def absorb(self, x, points, weights, y):
        fmap = self.kernel.feature
        points = np.asarray(points, dtype=float)
        weights = np.asarray(weights, dtype=float)
        y = np.asarray(y, dtype=float)
        u = np.zeros(fmap.rows)
        for w, p in zip(weights, points):
            u += w * (fmap(x, p) @ (y - p))
        cross = float(self.g @ u)
        w_t = float(u @ u)
        self.g = self.g + u
        self.rounds += 1
        return cross, w_t

    def operator_bound(self):
        return self.kernel.feature.bound * float(np.linalg.norm(self.g))


class _SumHistory(KernelHistory):
    def __init__(self, kernel, context_dim):
        super().__init__(kernel, context_dim)
        self.parts = [part.make_history(context_dim) for part in kernel.parts]

    def operator(self, x):
        ops = [part.operator(x) for part in self.parts]

        def op(p):
            return sum(o(p) for o in ops)

        return op

    def absorb(self, x, points, weights, y):
        cross = 0.0
        w_t = 0.0
        for part in self.parts:
            c, w = part.absorb(x, points, weights, y)
            cross += c
            w_t += w
        self.rounds += 1
        return cross, w_t

    def operator_bound(self):
        return sum(part.operator_bound() for part in self.parts)


def k29_operator(history: KernelHistory, x: np.ndarray):
    """The defensive operator S_t(., x) at the history's current state."""
    return history.operator(x)


# -- explicit tables ----------------------------------------------------------

def affine_family_from_tables(mats: np.ndarray, offs: np.ndarray,
                              names: Optional[Sequence[str]] = None,
                              outer_radius: float = 1.0) -> list[TestFunction]:
    """Context-free affine members h_i(x, p) = M_i p + c_i, one per table
    row; tables have shapes (n, d, d) and (n, d)."""
    mats = np.asarray(mats, dtype=float)
    offs = np.asarray(offs, dtype=float)
    if mats.ndim != 3 or offs.ndim != 2 or mats.shape[:2] != offs.shape:
        raise ContractError("tables must have shapes (n, d, d) and (n, d)")
    n = offs.shape[0]
    funcs = []
    for i in range(n):
        name = names[i] if names else f"affine[{i}]"
        funcs.append(affine_test(name, mats[i], offs[i], outer_radius))
    return funcs


def load_affine_tables(path) -> tuple[np.ndarray, np.ndarray]:
    """CSV rows: idx,i,j,value with j = -1 marking offset entries.
    Returns dense (mats, offs) sized by the maxima present."""
    entries = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            entries.append((int(row["idx"]), int(row["i"]), int(row["j"]),
                            float(row["value"])))
    if not entries:
        raise ContractError("empty table file")
    n = max(e[0] for e in entries) + 1
    dim = max(e[1] for e in entries) + 1
    mats = np.zeros((n, dim, dim))
    offs = np.zeros((n, dim))
    for idx, i, j, val in entries:
        if j < 0:
            offs[idx, i] = val
        else:
            mats[idx, i, j] = val
    return mats, offs
