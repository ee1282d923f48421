"""Decision-making on top of forecasts: best responses and deviation regret.

The decision maker forecasts its loss vector, then plays the pushforward of
the forecast distribution under the best response sigma(p) = argmin <p, z>
over the action body.  For any deviation phi mapping actions into the
action body,

    sum_t E[ <loss_t, z - phi(x_t, z)> ]                     (deviation regret)
      = MC(h_phi) + sum_t E[ <h_phi(x_t, p), p> ]            (exactly)

with h_phi(x, p) = sigma(p) - phi(x, sigma(p)); the second term is
nonpositive round by round because sigma(p) minimizes <p, .> and
phi(x, sigma(p)) stays in the action body.  Calibrating against
{h_phi} therefore controls the whole deviation class.

Deviations come in four flavors: constant maps, vertex swaps, linear
endomorphisms, and kernel-section perturbations (projected back into the
body, so membership holds by construction).  Candidate linear maps are
membership-checked on vertices and failing candidates are excluded.
"""

from __future__ import annotations

import itertools
import json
import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError
from .forecaster import (K29Engine, ReductionEngine, Transcript,
                         LinearTestFamily)
from .geometry import ConvexBody, FiniteSupportDistribution
from .learners import Hedge
from .rng import derive_rng
from .testfns import (FeatureMap, MatrixKernel, TestFunction, feature_kernel,
                      kernel_sum, scalar_lift, warp_kernel)


def best_response(action_body: ConvexBody, p: np.ndarray) -> np.ndarray:
    """argmin over the action body of <p, z>; deterministic tie-breaks make
    repeated calls bitwise identical, so memoization is a pure speedup."""
    return action_body.linopt(p)


def best_response_batch(action_body: ConvexBody, P: np.ndarray) -> np.ndarray:
    """Row-wise best responses, bitwise equal to best_response per row."""
    P = np.asarray(P, dtype=float)
    kind = action_body.kind
    if kind == "simplex":
        out = np.zeros_like(P)
        out[np.arange(P.shape[0]), np.argmin(P, axis=1)] = 1.0
        return out
    if kind == "box":
        lo, hi = action_body.lo, action_body.hi
        out = np.where(P > 0.0, lo[None, :], hi[None, :])
        return np.where(P == 0.0, lo[None, :], out).astype(float)
    if kind == "vertex_polytope":
        scores = P @ action_body.points.T
        return action_body.points[np.argmin(scores, axis=1)].copy()
    return np.array([action_body.linopt(p) for p in P])


@dataclass(frozen=True, eq=False)
class Deviation:
    """A map (x, z) -> z' into the action body.  Affine deviations carry
    mat/off with phi(x, z) = mat @ z + off, which audits and mixtures
    exploit; others supply fn alone."""

    name: str
    kind: str  # constant | finite_swap | linear | kernel | identity
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    mat: Optional[np.ndarray] = None
    off: Optional[np.ndarray] = None

    @property
    def is_affine(self) -> bool:
        return self.mat is not None

    def apply_batch(self, x: np.ndarray, Z: np.ndarray) -> np.ndarray:
        Z = np.asarray(Z, dtype=float)
        if self.is_affine:
            return Z @ self.mat.T + self.off[None, :]
        return np.array([self.fn(x, z) for z in Z])


def identity_deviation(k: int) -> Deviation:
    return Deviation(name="identity", kind="identity", fn=lambda x, z: z,
                     mat=np.eye(k), off=np.zeros(k))


def _affine_deviation(name: str, kind: str, mat: np.ndarray,
                      off: np.ndarray) -> Deviation:
    mat = np.asarray(mat, dtype=float)
    off = np.asarray(off, dtype=float)
    return Deviation(name=name, kind=kind, mat=mat, off=off,
                     fn=lambda x, z: mat @ z + off)


def _affine_is_endomorphism(body: ConvexBody, mat, off, tol=1e-9) -> bool:
    """Exact for polytopes (vertex images suffice by convexity); spectral
    condition for balls."""
    if body.is_polytope:
        return all(body.contains(mat @ v + off) for v in body.vertices())
    center = body.center
    image_center = mat @ center + off
    shift = float(np.linalg.norm(image_center - center))
    return float(np.linalg.norm(mat, 2)) * body.radius + shift <= body.radius + tol


def constant_deviations(action_body: ConvexBody, count: Optional[int] = None,
                        seed: int = 0) -> list[Deviation]:
    """Constant maps to fixed points of the body (vertices, or sampled
    points for balls), identity first."""
    k = action_body.dim
    devs = [identity_deviation(k)]
    if action_body.is_polytope:
        targets = action_body.vertices()
        if count is not None and len(targets) > count:
            rng = derive_rng(seed, 0x434F4E53)
            idx = rng.choice(len(targets), size=count, replace=False)
            targets = targets[np.sort(idx)]
    else:
        rng = derive_rng(seed, 0x434F4E53)
        targets = np.array([action_body.sample(rng)
                            for _ in range(count or 8)])
    for i, z0 in enumerate(targets):
        devs.append(_affine_deviation(f"const[{i}]", "constant",
                                      np.zeros((k, k)), z0))
    return devs


def vertex_swap_deviations(action_body: ConvexBody,
                           cap: Optional[int] = None,
                           seed: int = 0) -> list[Deviation]:
    """All vertex-to-vertex relabelings of a simplex extended linearly:
    column-stochastic 0/1 matrices.  k^k maps, seeded subsample past cap."""
    if action_body.kind != "simplex":
        raise ContractError("vertex swaps are defined on the simplex")
    k = action_body.dim
    total = k**k
    if cap is not None and total > cap:
        rng = derive_rng(seed, 0x53574150)
        pis = {tuple(range(k))}
        while len(pis) < cap:
            pis.add(tuple(int(v) for v in rng.integers(0, k, size=k)))
        maps = sorted(pis)
    else:
        maps = list(itertools.product(range(k), repeat=k))
    devs = []
    for pi in maps:
        P = np.zeros((k, k))
        for i, j in enumerate(pi):
            P[j, i] = 1.0
        devs.append(_affine_deviation("swap" + "".join(str(j) for j in pi),
                                      "finite_swap", P, np.zeros(k)))
    return devs


def linear_deviations(action_body: ConvexBody, count: int = 16,
                      seed: int = 0) -> list[Deviation]:
    """Random linear endomorphisms of the body, identity first.

    Simplex: column-stochastic matrices.  [0,1]^d boxes: nonnegative rows
    with row sums <= 1.  Balls: contractions around the center.  Other
    polytopes: rejection against the vertex criterion."""
    k = action_body.dim
    rng = derive_rng(seed, 0x4C494E44)
    devs = [identity_deviation(k)]
    kind = action_body.kind
    made = 0
    attempts = 0
    while made < count and attempts < 50 * count:
        attempts += 1
        if kind == "simplex":
            mat = rng.dirichlet(np.ones(k), size=k).T  # columns on the simplex
            off = np.zeros(k)
        elif kind == "box" and np.all(action_body.lo == 0.0) and np.all(action_body.hi == 1.0):
            rows = rng.dirichlet(np.ones(k), size=k)
            mat = rows * rng.uniform(0.0, 1.0, size=(k, 1))
            off = np.zeros(k)
        elif kind in ("euclidean_ball", "frobenius_ball"):
            raw = rng.normal(size=(k, k))
            mat = raw / max(1.0, float(np.linalg.norm(raw, 2)))
            c = action_body.center
            off = c - mat @ c
        else:
            mat = rng.dirichlet(np.ones(k), size=k).T
            off = np.zeros(k)
        if not _affine_is_endomorphism(action_body, mat, off):
            continue  # failing candidates are excluded
        devs.append(_affine_deviation(f"lin[{made}]", "linear", mat, off))
        made += 1
    return devs


def kernel_deviations(action_body: ConvexBody, base_kernel: MatrixKernel,
                      count: int = 8, seed: int = 0,
                      scale: float = 0.5) -> list[Deviation]:
    """Kernel-section perturbations z - scale * Gamma((x,z),(x0,z0)) c,
    projected back into the body so membership holds by construction."""
    rng = derive_rng(seed, 0x4B444556)
    k = action_body.dim
    devs = [identity_deviation(k)]
    for i in range(count):
        z0 = action_body.sample(rng)
        c = rng.normal(size=k)
        c = scale * c / float(np.linalg.norm(c))
        x0 = np.zeros(1)

        def fn(x, z, z0=z0, c=c, x0=x0):
            g = base_kernel.eval(x, z, x0, z0) @ c
            return action_body.project(z - g)

        devs.append(Deviation(name=f"ker[{i}]", kind="kernel", fn=fn))
    return devs


# -- deviation test functions ---------------------------------------------------

def phi_test(dev: Deviation, action_body: ConvexBody,
             name: Optional[str] = None) -> TestFunction:
    """h_phi(x, p) = sigma(p) - phi(x, sigma(p)); both terms live in the
    action body, so its diameter bounds the norm."""

    def fn(x, p):
        z = best_response(action_body, p)
        return z - np.asarray(dev.fn(x, z), dtype=float)

    def fn_batch(x, P):
        Z = best_response_batch(action_body, P)
        return Z - dev.apply_batch(x, Z)

    return TestFunction(name=name or f"h[{dev.name}]", fn=fn,
                        fn_batch=fn_batch,
                        bound=action_body.diameter_bound,
                        dim=action_body.dim)


def phi_family(deviations: Sequence[Deviation],
               action_body: ConvexBody) -> list[TestFunction]:
    return [phi_test(d, action_body) for d in deviations]


class SwapTestFamily:
    """Hedge over affine deviations with the mixture collapsed: the played
    function is (I - sum_i lam_i P_i) sigma(p) - sum_i lam_i q_i, so one
    best response per forecast point serves every member.  Best responses
    are memoized per round (they are bitwise deterministic regardless)."""

    def __init__(self, deviations: Sequence[Deviation], action_body: ConvexBody,
                 loss_body: ConvexBody, horizon: int,
                 loss_scale: Optional[float] = None):
        if not deviations:
            raise ContractError("need at least one deviation")
        if not all(d.is_affine for d in deviations):
            raise ContractError("this family needs affine deviations")
        self.deviations = list(deviations)
        self.action_body = action_body
        self.loss_body = loss_body
        self.mats = np.stack([d.mat for d in self.deviations])
        self.offs = np.stack([d.off for d in self.deviations])
        self.members = phi_family(self.deviations, action_body)
        if loss_scale is None:
            loss_scale = action_body.diameter_bound * loss_body.diameter_bound
        self.loss_scale = max(loss_scale, 1e-12)
        self.learner = Hedge(len(self.deviations), horizon,
                             loss_scale=self.loss_scale)

    def _mix(self, lam: np.ndarray):
        k = self.action_body.dim
        B = np.eye(k) - np.einsum("i,iuv->uv", lam, self.mats)
        q = lam @ self.offs
        return B, q

    def propose(self, t: int, x: np.ndarray):
        lam = self.learner.next()
        B, q = self._mix(lam)
        body = self.action_body
        cache: dict[bytes, np.ndarray] = {}

        def op(p):
            key = p.tobytes()
            z = cache.get(key)
            if z is None:
                z = best_response(body, p)
                cache[key] = z
            return B @ z - q

        bound = (float(np.linalg.norm(B, 2)) * body.outer_radius
                 + float(np.linalg.norm(q)))
        return lam, op, bound

    def gradient(self, x, points, weights, y) -> np.ndarray:
        Z = best_response_batch(self.action_body, points)
        resid = y[None, :] - np.asarray(points, dtype=float)
        R = np.einsum("a,au,av->uv", weights, resid, Z)
        rsum = weights @ resid
        k = self.action_body.dim
        red = np.eye(k)[None, :, :] - self.mats
        f = np.einsum("nuv,uv->n", red, R) - self.offs @ rsum
        return -f

    @staticmethod
    def scale_gradient(grad: np.ndarray, c: float) -> np.ndarray:
        return c * grad

    def absorb(self, grads: list) -> None:
        self.learner.feed_batch(list(grads))


def swap_values_builder(family: SwapTestFamily):
    """Played-function values for certificate audits of swap transcripts."""

    def values_at(i, r, P):
        B, q = family._mix(r.params)
        Z = best_response_batch(family.action_body, P)
        return Z @ B.T - q[None, :]

    return values_at


# -- the decision protocol --------------------------------------------------------

@dataclass
class DecisionRound:
    mu_points: np.ndarray  # best responses aligned with the forecast atoms
    loss: np.ndarray

    def jsonable(self):
        return {"mu_points": self.mu_points.tolist(),
                "loss": self.loss.tolist()}


class DecisionTranscript:
    """Forecast transcript plus the realized decision layer: pushforward
    atoms (aligned with forecast atoms, sharing their weights) and losses."""

    def __init__(self, forecasts: Transcript, action_body: ConvexBody):
        self.forecasts = forecasts
        self.action_body = action_body
        self.rounds: list[DecisionRound] = []

    def __len__(self):
        return len(self.rounds)

    def jsonable(self) -> dict:
        return {"action_body": self.action_body.spec(),
                "decisions": [r.jsonable() for r in self.rounds],
                "forecasts": self.forecasts.jsonable()}

    def canonical_json(self) -> str:
        return json.dumps(self.jsonable(), sort_keys=True, separators=(",", ":"))

    def sha256(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.canonical_json())

    @staticmethod
    def from_jsonable(data: dict) -> "DecisionTranscript":
        from .geometry import body_from_spec
        out = DecisionTranscript(Transcript.from_jsonable(data["forecasts"]),
                                 body_from_spec(data["action_body"]))
        for rd in data["decisions"]:
            out.rounds.append(DecisionRound(
                mu_points=np.asarray(rd["mu_points"], dtype=float),
                loss=np.asarray(rd["loss"], dtype=float)))
        return out

    @staticmethod
    def from_json(path) -> "DecisionTranscript":
        with open(path) as fh:
            return DecisionTranscript.from_jsonable(json.load(fh))


class DecisionEngine:
    """Wraps a multicalibration engine whose body is the loss space; each
    round forecasts the loss vector, pushes the distribution through the
    best response, and feeds the realized loss back as the outcome."""

    def __init__(self, action_body: ConvexBody, inner):
        self.action_body = action_body
        self.inner = inner
        if hasattr(inner, "k29_round"):
            self._round_fn = inner.k29_round
        elif hasattr(inner, "mc_round"):
            self._round_fn = inner.mc_round
        else:
            raise ContractError("inner engine exposes no forecasting round")
        self.transcript = DecisionTranscript(inner.transcript, action_body)
        self._pending_mu: Optional[np.ndarray] = None

    def phi_round(self, x) -> FiniteSupportDistribution:
        dist = self._round_fn(x)
        mu = best_response_batch(self.action_body, dist.points)
        self._pending_mu = mu
        return FiniteSupportDistribution(self.action_body, mu, dist.weights)

    def phi_observe(self, loss) -> None:
        loss = np.asarray(loss, dtype=float)
        self.inner.mc_observe(loss)
        self.transcript.rounds.append(
            DecisionRound(mu_points=self._pending_mu, loss=loss))
        self._pending_mu = None

    def finalize(self, flush: bool = True) -> None:
        self.inner.finalize(flush)

    def run(self, nature, horizon: int) -> DecisionTranscript:
        for t in range(1, horizon + 1):
            x = nature.context(t)
            mu = self.phi_round(x)
            loss = nature.outcome(t, np.atleast_1d(np.asarray(x, float)).ravel(), mu)
            self.phi_observe(loss)
        self.finalize()
        return self.transcript


def phi_round(engine: DecisionEngine, x):
    return engine.phi_round(x)


def phi_observe(engine: DecisionEngine, loss):
    return engine.phi_observe(loss)


# -- regret audits -----------------------------------------------------------------

@dataclass
class PhiRegret:
    """The exact decomposition deviation-regret = MC + slack."""

    total: float
    mc: float
    slack_sum: float
    slack_series: np.ndarray

    def __iter__(self):
        return iter((self.total, self.mc, self.slack_sum))


def phi_regret(dt: DecisionTranscript, dev: Deviation) -> PhiRegret:
    """Evaluate the deviation's regret and its exact split into
    calibration error plus per-round slack, reusing the stored
    pushforward atoms so the identity is tight to float roundoff."""
    T = len(dt.rounds)
    if len(dt.forecasts.rounds) != T:
        raise ContractError("decision and forecast layers disagree on length")
    total = 0.0
    mc = 0.0
    slack = np.zeros(T)
    for i, (fr, dr) in enumerate(zip(dt.forecasts.rounds, dt.rounds)):
        Z = dr.mu_points
        H = Z - dev.apply_batch(fr.x, Z)
        w = fr.weights
        total += float(np.einsum("a,ad,d->", w, H, dr.loss))
        mc += float(np.einsum("a,ad,ad->", w, H, dr.loss[None, :] - fr.points))
        slack[i] = float(np.einsum("a,ad,ad->", w, H, fr.points))
    return PhiRegret(total=total, mc=mc, slack_sum=float(slack.sum()),
                     slack_series=slack)


def max_linear_swap_regret(dt: DecisionTranscript, class_kind: str):
    """Closed-form maximum of deviation regret over a linear class.

    With G = sum_t outer(loss_t, mean action_t), regret of phi(z) = P z is
    tr(G) - <P, G>; the minimizing P decomposes per column (simplex,
    column-stochastic) or per row (box, nonnegative rows summing <= 1).
    Returns (max regret, argmax deviation)."""
    k = dt.action_body.dim
    G = np.zeros((k, k))
    for fr, dr in zip(dt.forecasts.rounds, dt.rounds):
        m = fr.weights @ dr.mu_points
        G += np.outer(dr.loss, m)
    P = np.zeros((k, k))
    if class_kind == "simplex":
        for j in range(k):
            P[int(np.argmin(G[:, j])), j] = 1.0
    elif class_kind == "box":
        for u in range(k):
            j = int(np.argmin(G[u, :]))
            if G[u, j] < 0.0:
                P[u, j] = 1.0
    else:
        raise ContractError(f"unknown linear class {class_kind!r}")
    value = float(np.trace(G) - np.sum(P * G))
    return value, _affine_deviation("argmax-linear", "linear", P, np.zeros(k))


def enumerate_vertex_swap_regret(dt: DecisionTranscript) -> float:
    """Brute-force max over all k^k vertex maps via per-map evaluation."""
    devs = vertex_swap_deviations(dt.action_body)
    return max(phi_regret(dt, d).total for d in devs)


# -- engine constructors -------------------------------------------------------------

def swap_radius(k: int, spectral_bound: Optional[float] = None) -> float:
    """Frobenius radius covering I - M for the linear endomorphism classes:
    sqrt(k) + sqrt(k) * S with S a spectral bound on the class (sqrt(k)
    for both column-stochastic and row-substochastic matrices)."""
    S = math.sqrt(k) if spectral_bound is None else spectral_bound
    return math.sqrt(k) + math.sqrt(k) * S


def best_response_feature_map(action_body: ConvexBody) -> FeatureMap:
    """Psi(x, p) = kron(I_k, sigma(p)): theta = vec(A) row-major plays
    p -> A sigma(p), covering every linear deviation comparator."""
    k = action_body.dim

    def scalar_fn(x, p):
        return best_response(action_body, p)

    return scalar_lift("best-response", scalar_fn, k, k,
                       scalar_bound=action_body.outer_radius)


def finite_swap_engine(action_body: ConvexBody, loss_body: ConvexBody,
                       deviations: Sequence[Deviation], horizon: int,
                       seed: int = 0, **engine_kw) -> DecisionEngine:
    fam = SwapTestFamily(deviations, action_body, loss_body, horizon)
    inner = ReductionEngine(loss_body, fam, seed=seed, **engine_kw)
    return DecisionEngine(action_body, inner)


def linear_swap_engine(action_body: ConvexBody, loss_body: ConvexBody,
                       horizon: int, seed: int = 0,
                       spectral_bound: Optional[float] = None,
                       **engine_kw) -> DecisionEngine:
    fmap = best_response_feature_map(action_body)
    rho = swap_radius(action_body.dim, spectral_bound)
    budget = horizon * (fmap.bound * loss_body.diameter_bound) ** 2
    fam = LinearTestFamily(fmap, rho, budget)
    inner = ReductionEngine(loss_body, fam, seed=seed, **engine_kw)
    return DecisionEngine(action_body, inner)


def rkhs_phi_kernel(base: MatrixKernel, action_body: ConvexBody) -> MatrixKernel:
    """Deviation kernel sigma(p) sigma(p')^T + Gamma((x, sigma p), (x', sigma p')):
    the rank-one part prices external comparisons, the warped base prices
    kernel-section deviations acting on the chosen action."""
    if base.dim != action_body.dim:
        raise ContractError("base kernel must act on action coordinates")

    def sigma(x, p):
        return best_response(action_body, p)

    k = action_body.dim
    br_row = FeatureMap(name="best-response-row", rows=1, dim=k,
                        bound=action_body.outer_radius,
                        fn=lambda x, p: best_response(action_body, p)[None, :])
    return kernel_sum(feature_kernel(br_row), warp_kernel(base, sigma))


def kernel_swap_engine(action_body: ConvexBody, loss_body: ConvexBody,
                       base_kernel: MatrixKernel, horizon: int,
                       context_dim: int = 1, radius: float = 1.0,
                       seed: int = 0, **engine_kw) -> DecisionEngine:
    kern = rkhs_phi_kernel(base_kernel, action_body)
    budget = horizon * (kern.value_bound() * loss_body.diameter_bound**2)
    inner = K29Engine(loss_body, kern, context_dim=context_dim, radius=radius,
                      grad_sq_budget=budget, seed=seed, **engine_kw)
    return DecisionEngine(action_body, inner)
