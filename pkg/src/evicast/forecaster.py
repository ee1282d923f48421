"""Multicalibration engines and transcript audits.

The generic reduction runs, per round: a no-regret learner proposes a test
function h_t; an EVI solve over h_t(x_t, .) yields the forecast
distribution D_t; the outcome y_t prices the linear loss
f_t(h) = -E_{p ~ D_t}[h(x_t, p)^T (y_t - p)], which is fed back to the
learner.  Everything observable is written to a Transcript, and every
ledger in this module recomputes its inequality from the transcript alone.

Protocol variants:
* delayed: the round-t loss reaches the learner at round t + d_t; the
  standard protocol is exactly the d_t = 1 case and shares its code path,
  so a delay-1 run is byte-identical to a standard run by construction;
* censored: with probability gamma the engine outputs the exploration
  distribution and observes y_t, feeding the importance-weighted loss;
  otherwise it outputs the solved distribution and learns nothing.  The
  effective output is the (1-gamma)/gamma mixture and that is what the
  transcript records as played;
* defensive forecasting: the proposed function is the kernel-history
  operator scaled by the ball-regularized-leader trust coefficient; for
  factorized kernels this coincides with the linear-family engine
  arithmetic exactly.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, ProtocolError, UnresolvedOutcomeError
from .evi import EviProblem, EviSolution, SolverConfig, eps_schedule, solve_evi
from .geometry import ConvexBody, FiniteSupportDistribution
from .learners import BallRegularizedLeader, Hedge, ftrl_ball_step
from .rng import EVI_INIT, BERNOULLI, derive_rng
from .testfns import FeatureMap, TestFunction, finite_family_mix, values_of

BOUND_SLACK = 1e-12


def _round_seed(root: int, t: int) -> int:
    return int(np.random.SeedSequence((int(root), EVI_INIT, int(t))).generate_state(1)[0])


def _aslist(a: Optional[np.ndarray]):
    if a is None:
        return None
    return np.asarray(a, dtype=float).tolist()


def _asarr(v) -> Optional[np.ndarray]:
    if v is None:
        return None
    return np.asarray(v, dtype=float)


@dataclass
class ForecastRound:
    """One protocol row.  points/weights are the played (effective)
    distribution; solved_* is the EVI solution of the round (identical
    unless censoring mixed in the exploration distribution).  y is None
    while the outcome is pending delivery."""

    t: int
    x: np.ndarray
    params: np.ndarray
    points: np.ndarray
    weights: np.ndarray
    solved_points: np.ndarray
    solved_weights: np.ndarray
    eps_target: float
    eps_realized: float
    hit_cap: bool
    y: Optional[np.ndarray]
    z: int
    delivery_t: int
    alpha: float = float("nan")
    w_term: float = float("nan")

    def jsonable(self) -> dict:
        return {
            "t": self.t,
            "x": _aslist(self.x),
            "params": _aslist(self.params),
            "points": _aslist(self.points),
            "weights": _aslist(self.weights),
            "solved_points": _aslist(self.solved_points),
            "solved_weights": _aslist(self.solved_weights),
            "eps_target": self.eps_target,
            "eps_realized": self.eps_realized,
            "hit_cap": bool(self.hit_cap),
            "y": _aslist(self.y),
            "z": self.z,
            "delivery_t": self.delivery_t,
            "alpha": None if math.isnan(self.alpha) else self.alpha,
            "w_term": None if math.isnan(self.w_term) else self.w_term,
        }

    @staticmethod
    def from_jsonable(d: dict) -> "ForecastRound":
        return ForecastRound(
            t=d["t"], x=_asarr(d["x"]), params=_asarr(d["params"]),
            points=_asarr(d["points"]), weights=_asarr(d["weights"]),
            solved_points=_asarr(d["solved_points"]),
            solved_weights=_asarr(d["solved_weights"]),
            eps_target=d["eps_target"], eps_realized=d["eps_realized"],
            hit_cap=d["hit_cap"], y=_asarr(d["y"]), z=d["z"],
            delivery_t=d["delivery_t"],
            alpha=float("nan") if d.get("alpha") is None else d["alpha"],
            w_term=float("nan") if d.get("w_term") is None else d["w_term"])


class Transcript:
    """Ordered rounds plus a config-echo header; canonical JSON hashing."""

    def __init__(self, header: Optional[dict] = None):
        self.header = dict(header or {})
        self.rounds: list[ForecastRound] = []

    def append(self, r: ForecastRound) -> None:
        if r.t != len(self.rounds) + 1:
            raise ContractError("round indices must be contiguous from 1")
        self.rounds.append(r)

    def __len__(self):
        return len(self.rounds)

    def jsonable(self) -> dict:
        return {"header": self.header,
                "rounds": [r.jsonable() for r in self.rounds]}

    def canonical_json(self) -> str:
        return json.dumps(self.jsonable(), sort_keys=True, separators=(",", ":"))

    def sha256(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.canonical_json())

    @staticmethod
    def from_jsonable(data: dict) -> "Transcript":
        out = Transcript(data["header"])
        for rd in data["rounds"]:
            out.rounds.append(ForecastRound.from_jsonable(rd))
        return out

    @staticmethod
    def from_json(path) -> "Transcript":
        with open(path) as fh:
            data = json.load(fh)
        return Transcript.from_jsonable(data)

    def write_csv(self, path) -> None:
        import csv as _csv
        with open(path, "w", newline="") as fh:
            w = _csv.writer(fh)
            w.writerow(["t", "x", "atoms", "eps_target", "eps_realized",
                        "y", "z", "delivery_t"])
            for r in self.rounds:
                atoms = json.dumps({"points": _aslist(r.points),
                                    "weights": _aslist(r.weights)},
                                   separators=(",", ":"))
                w.writerow([r.t, json.dumps(_aslist(r.x), separators=(",", ":")),
                            atoms, repr(r.eps_target), repr(r.eps_realized),
                            "" if r.y is None else json.dumps(_aslist(r.y),
                                                              separators=(",", ":")),
                            r.z, r.delivery_t])


# -- learner-side family adapters ---------------------------------------------

class FiniteTestFamily:
    """Hedge over an explicit list of test functions; the played function
    is the weight mixture and the loss vector is linear in the weights."""

    def __init__(self, members: Sequence[TestFunction], body: ConvexBody,
                 horizon: int, loss_scale: Optional[float] = None):
        if not members:
            raise ContractError("family must be nonempty")
        self.members = list(members)
        self.body = body
        if loss_scale is None:
            loss_scale = max(h.bound for h in members) * body.diameter_bound
        self.loss_scale = max(loss_scale, 1e-12)
        self.learner = Hedge(len(self.members), horizon, loss_scale=self.loss_scale)

    def propose(self, t: int, x: np.ndarray):
        lam = self.learner.next()
        mixed = finite_family_mix(self.members, lam)
        op = lambda p: mixed(x, p)
        bound = max(h.bound for h in self.members)
        return lam, op, bound

    def gradient(self, x, points, weights, y) -> np.ndarray:
        resid = y[None, :] - points
        f = np.empty(len(self.members))
        for i, h in enumerate(self.members):
            vals = values_of(h, x, points)
            f[i] = -float(np.einsum("a,ad,ad->", weights, vals, resid))
        return f

    @staticmethod
    def scale_gradient(grad: np.ndarray, c: float) -> np.ndarray:
        return c * grad

    def absorb(self, grads: list) -> None:
        self.learner.feed_batch(list(grads))


class LinearTestFamily:
    """Ball-regularized leader over theta; played function Psi^T theta.

    The gradient accumulation below is arithmetically identical to the
    factorized kernel history's update, which is what makes the
    defensive-forecasting engine and this one the same algorithm.
    """

    def __init__(self, fmap: FeatureMap, radius: float, grad_sq_budget: float):
        self.fmap = fmap
        self.radius = radius
        self.learner = BallRegularizedLeader(fmap.rows, radius, grad_sq_budget)

    def propose(self, t: int, x: np.ndarray):
        theta = self.learner.next()
        fmap = self.fmap
        op = lambda p: fmap(x, p).T @ theta
        bound = fmap.bound * float(np.linalg.norm(theta))
        return theta, op, bound

    def gradient(self, x, points, weights, y) -> np.ndarray:
        u = np.zeros(self.fmap.rows)
        for w, p in zip(weights, points):
            u += w * (self.fmap(x, p) @ (y - p))
        return -u

    @staticmethod
    def scale_gradient(grad: np.ndarray, c: float) -> np.ndarray:
        return c * grad

    def absorb(self, grads: list) -> None:
        for g in grads:
            self.learner.feed(g)


# -- engines -------------------------------------------------------------------

class ReductionEngine:
    """The generic online-learning -> multicalibration reduction; delays
    configure the delivery round of each loss (1 = standard protocol)."""

    def __init__(self, body: ConvexBody, family, seed: int = 0,
                 eps_policy: str = "default",
                 delays: Union[int, Sequence[int], Callable[[int], int]] = 1,
                 solver_config: Optional[SolverConfig] = None,
                 header: Optional[dict] = None):
        self.body = body
        self.family = family
        self.seed = int(seed)
        self.eps_policy = eps_policy
        self.delays = delays
        self.solver_config = solver_config
        self.transcript = Transcript(header)
        self.t = 0
        self._open: Optional[dict] = None
        self._queue: dict[int, list] = {}
        self._pending_y: dict[int, np.ndarray] = {}

    def _delay_of(self, t: int) -> int:
        if callable(self.delays):
            d = self.delays(t)
        elif isinstance(self.delays, int):
            d = self.delays
        else:
            d = self.delays[t - 1]
        if d < 1:
            raise ContractError("delays must be >= 1")
        return int(d)

    def _deliver_due(self, t) -> None:
        due = sorted(k for k in self._queue if k <= t)
        grads = []
        for k in due:
            grads.extend(self._queue.pop(k))
        if grads:
            self.family.absorb(grads)
        for k in sorted(j for j in self._pending_y if j <= t):
            for src in self._pending_y.pop(k):
                self.transcript.rounds[src["round"] - 1].y = src["y"]

    def mc_round(self, x) -> FiniteSupportDistribution:
        if self._open is not None:
            raise ProtocolError("previous round's outcome not observed yet")
        t = self.t + 1
        x = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
        self._deliver_due(t)
        params, op, bound = self.family.propose(t, x)
        target = eps_schedule(t, self.eps_policy)
        prob = EviProblem(self.body, op, norm_bound=bound + BOUND_SLACK,
                          target_eps=target, label=f"round {t}")
        sol = solve_evi(prob, seed=_round_seed(self.seed, t),
                        config=self.solver_config)
        self.t = t
        self._open = {"t": t, "x": x, "params": np.asarray(params, dtype=float),
                      "sol": sol}
        return sol.dist

    def mc_observe(self, y) -> None:
        if self._open is None:
            raise ProtocolError("no open round")
        y = np.asarray(y, dtype=float)
        if not self.body.contains(y):
            raise ContractError("outcome outside the declared body")
        o = self._open
        t, x, sol = o["t"], o["x"], o["sol"]
        grad = self.family.gradient(x, sol.dist.points, sol.dist.weights, y)
        delivery = t + self._delay_of(t)
        self._queue.setdefault(delivery, []).append(grad)
        self._pending_y.setdefault(delivery, []).append({"round": t, "y": y})
        self.transcript.append(ForecastRound(
            t=t, x=x, params=o["params"],
            points=sol.dist.points, weights=sol.dist.weights,
            solved_points=sol.dist.points, solved_weights=sol.dist.weights,
            eps_target=sol.target_eps, eps_realized=sol.certified_gap,
            hit_cap=sol.hit_cap, y=None, z=1, delivery_t=delivery))
        self._open = None

    def finalize(self, flush: bool = True) -> None:
        if flush:
            self._deliver_due(math.inf)

    def run(self, nature, horizon: int) -> Transcript:
        for t in range(1, horizon + 1):
            x = nature.context(t)
            dist = self.mc_round(x)
            y = nature.outcome(t, np.atleast_1d(np.asarray(x, float)).ravel(), dist)
            self.mc_observe(y)
        self.finalize()
        return self.transcript


class K29Engine:
    """Defensive forecasting: the played function is the kernel-history
    operator scaled by the ball-regularized-leader trust coefficient."""

    def __init__(self, body: ConvexBody, kernel, context_dim: int,
                 radius: float, grad_sq_budget: float, seed: int = 0,
                 eps_policy: str = "default",
                 solver_config: Optional[SolverConfig] = None,
                 header: Optional[dict] = None):
        if radius <= 0 or grad_sq_budget <= 0:
            raise ContractError("radius and budget must be positive")
        self.body = body
        self.kernel = kernel
        self.context_dim = context_dim
        self.radius = radius
        self.eta = 2.0 * radius / math.sqrt(grad_sq_budget)
        self.history = kernel.make_history(context_dim)
        self.norm2 = 0.0
        self.seed = int(seed)
        self.eps_policy = eps_policy
        self.solver_config = solver_config
        self.transcript = Transcript(header)
        self.t = 0
        self._open: Optional[dict] = None

    @property
    def _is_factorized(self) -> bool:
        return self.kernel.kind == "feature"

    def k29_round(self, x) -> FiniteSupportDistribution:
        if self._open is not None:
            raise ProtocolError("previous round's outcome not observed yet")
        t = self.t + 1
        x = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
        if self._is_factorized:
            fmap = self.kernel.feature
            theta, alpha = ftrl_ball_step(self.history.g, self.eta, self.radius)
            op = lambda p: fmap(x, p).T @ theta
            bound = fmap.bound * float(np.linalg.norm(theta))
            params = theta
        else:
            r = math.sqrt(max(self.norm2, 0.0))
            alpha = self.eta / 2.0 if r == 0.0 else min(self.eta / 2.0,
                                                        self.radius / r)
            raw = self.history.operator(x)
            op = lambda p: alpha * raw(p)
            bound = alpha * min(self.history.operator_bound(),
                                r * math.sqrt(self.kernel.value_bound()))
            params = np.array([alpha])
        target = eps_schedule(t, self.eps_policy)
        prob = EviProblem(self.body, op, norm_bound=bound + BOUND_SLACK,
                          target_eps=target, label=f"round {t}")
        sol = solve_evi(prob, seed=_round_seed(self.seed, t),
                        config=self.solver_config)
        self.t = t
        self._open = {"t": t, "x": x, "params": np.asarray(params, dtype=float),
                      "sol": sol, "alpha": float(alpha)}
        return sol.dist

    def mc_observe(self, y) -> None:
        if self._open is None:
            raise ProtocolError("no open round")
        y = np.asarray(y, dtype=float)
        if not self.body.contains(y):
            raise ContractError("outcome outside the declared body")
        o = self._open
        sol: EviSolution = o["sol"]
        cross, w_t = self.history.absorb(o["x"], sol.dist.points,
                                         sol.dist.weights, y)
        self.norm2 += 2.0 * cross + w_t
        self.transcript.append(ForecastRound(
            t=o["t"], x=o["x"], params=o["params"],
            points=sol.dist.points, weights=sol.dist.weights,
            solved_points=sol.dist.points, solved_weights=sol.dist.weights,
            eps_target=sol.target_eps, eps_realized=sol.certified_gap,
            hit_cap=sol.hit_cap, y=y, z=1, delivery_t=o["t"],
            alpha=o["alpha"], w_term=w_t))
        self._open = None

    def finalize(self, flush: bool = True) -> None:
        pass

    def run(self, nature, horizon: int) -> Transcript:
        for t in range(1, horizon + 1):
            x = nature.context(t)
            dist = self.k29_round(x)
            y = nature.outcome(t, np.atleast_1d(np.asarray(x, float)).ravel(), dist)
            self.mc_observe(y)
        return self.transcript


class CensoredEngine:
    """Bernoulli(gamma)-gated observation: exploration rounds output the
    declared distribution and feed the importance-weighted loss; other
    rounds output the solved distribution and feed nothing.  The played
    record is always the effective mixture."""

    def __init__(self, body: ConvexBody, family, gamma: float,
                 exploration: FiniteSupportDistribution, seed: int = 0,
                 eps_policy: str = "sqrt",
                 solver_config: Optional[SolverConfig] = None,
                 header: Optional[dict] = None):
        if not 0.0 < gamma <= 1.0:
            raise ContractError("gamma must be in (0, 1]")
        if exploration.body is not body:
            if exploration.body.spec() != body.spec():
                raise ContractError("exploration distribution must live on the body")
        self.body = body
        self.family = family
        self.gamma = float(gamma)
        self.exploration = exploration
        self.seed = int(seed)
        self.eps_policy = eps_policy
        self.solver_config = solver_config
        self.transcript = Transcript(header)
        self.t = 0
        self._open: Optional[dict] = None
        self._pending: list = []
        self._zrng = derive_rng(seed, BERNOULLI)
        self._version = 0
        self._memo: dict = {}
        self._params: Optional[np.ndarray] = None

    def censored_round(self, x):
        if self._open is not None:
            raise ProtocolError("previous round's outcome not observed yet")
        t = self.t + 1
        x = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
        if self._pending:
            self.family.absorb(self._pending)
            self._pending = []
            self._version += 1
            self._memo.clear()
        key = x.tobytes()
        sol = self._memo.get(key)
        if sol is None:
            params, op, bound = self.family.propose(t, x)
            target = eps_schedule(t, self.eps_policy)
            prob = EviProblem(self.body, op, norm_bound=bound + BOUND_SLACK,
                              target_eps=target, label=f"round {t}")
            sol = solve_evi(prob, seed=_round_seed(self.seed, t),
                            config=self.solver_config)
            self._memo[key] = sol
            self._params = np.asarray(params, dtype=float)
        z = 1 if self._zrng.random() < self.gamma else 0
        self.t = t
        self._open = {"t": t, "x": x, "sol": sol, "z": z,
                      "params": self._params}
        return (self.exploration if z == 1 else sol.dist), z

    def mc_observe(self, y) -> None:
        if self._open is None:
            raise ProtocolError("no open round")
        y = np.asarray(y, dtype=float)
        if not self.body.contains(y):
            raise ContractError("outcome outside the declared body")
        o = self._open
        sol: EviSolution = o["sol"]
        if o["z"] == 1:
            raw = self.family.gradient(o["x"], sol.dist.points,
                                       sol.dist.weights, y)
            self._pending.append(self.family.scale_gradient(raw, 1.0 / self.gamma))
        g = self.gamma
        mix_points = np.vstack([sol.dist.points, self.exploration.points])
        mix_weights = np.concatenate([(1.0 - g) * sol.dist.weights,
                                      g * self.exploration.weights])
        t = o["t"]
        target = eps_schedule(t, self.eps_policy)
        self.transcript.append(ForecastRound(
            t=t, x=o["x"], params=o["params"],
            points=mix_points, weights=mix_weights,
            solved_points=sol.dist.points, solved_weights=sol.dist.weights,
            eps_target=target, eps_realized=sol.certified_gap,
            hit_cap=sol.certified_gap > target, y=y, z=o["z"], delivery_t=t))
        self._open = None

    def finalize(self, flush: bool = True) -> None:
        pass

    def run(self, nature, horizon: int) -> Transcript:
        if not getattr(nature, "non_adaptive", False):
            raise ContractError("censored protocol requires non-adaptive Nature")
        for t in range(1, horizon + 1):
            x = nature.context(t)
            self.censored_round(x)
            y = nature.outcome(t, np.atleast_1d(np.asarray(x, float)).ravel(), None)
            self.mc_observe(y)
        return self.transcript


# module-level protocol verbs

def mc_round(engine, x):
    return engine.mc_round(x)


def mc_observe(engine, y):
    return engine.mc_observe(y)


def k29_round(engine, x):
    return engine.k29_round(x)


def censored_round(engine, x):
    return engine.censored_round(x)


def delayed_protocol(engine: ReductionEngine, delays) -> ReductionEngine:
    """Configure per-round delivery delays before the run starts."""
    if engine.t != 0:
        raise ProtocolError("delays must be configured before the first round")
    engine.delays = delays
    return engine


class EviAdversaryNature:
    """Fixed context; outcome is the best response against the chosen
    test function's expected value under the played distribution."""

    non_adaptive = False

    def __init__(self, h: TestFunction, x, body: ConvexBody):
        self.h = h
        self.x = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
        self.body = body

    def context(self, t):
        return self.x

    def outcome(self, t, x, dist: FiniteSupportDistribution):
        vals = values_of(self.h, self.x, dist.points)
        a = vals.T @ dist.weights
        return self.body.linopt(-a)


def evi_adversary(h: TestFunction, x, body: ConvexBody) -> EviAdversaryNature:
    return EviAdversaryNature(h, x, body)


# -- audits --------------------------------------------------------------------

def _require_resolved(transcript: Transcript) -> None:
    for r in transcript.rounds:
        if r.y is None:
            raise UnresolvedOutcomeError(
                f"round {r.t} outcome pending (delivery at {r.delivery_t})")


def mc_error(transcript: Transcript, h: TestFunction):
    """Sum over rounds of E_{p ~ played}[h(x,p)^T (y-p)]; returns
    (total, per-round series)."""
    _require_resolved(transcript)
    series = np.zeros(len(transcript.rounds))
    for i, r in enumerate(transcript.rounds):
        vals = values_of(h, r.x, r.points)
        series[i] = float(np.einsum("a,ad,ad->", r.weights, vals,
                                    r.y[None, :] - r.points))
    return float(series.sum()), series


def evi_total(transcript: Transcript) -> float:
    return float(sum(r.eps_realized for r in transcript.rounds))


@dataclass
class LedgerRow:
    name: str
    mc: float
    regret: float
    eps_sum: float
    rhs: float
    ok: bool
    slack: float


def finite_loss_matrix(transcript: Transcript,
                       members: Sequence[TestFunction]) -> np.ndarray:
    """F[t, i] = -E_{p ~ solved}[h_i(x_t,p)^T (y_t-p)], recomputed."""
    _require_resolved(transcript)
    F = np.zeros((len(transcript.rounds), len(members)))
    for ti, r in enumerate(transcript.rounds):
        resid = r.y[None, :] - r.solved_points
        for i, h in enumerate(members):
            vals = values_of(h, r.x, r.solved_points)
            F[ti, i] = -float(np.einsum("a,ad,ad->", r.solved_weights, vals, resid))
    return F


def finite_reduction_ledger(transcript: Transcript,
                            members: Sequence[TestFunction],
                            tol_per_round: float = 1e-8) -> list[LedgerRow]:
    F = finite_loss_matrix(transcript, members)
    T = len(transcript.rounds)
    lam = np.array([r.params for r in transcript.rounds]) if T else np.zeros((0, len(members)))
    played = np.einsum("ti,ti->t", lam, F) if T else np.zeros(0)
    eps_sum = evi_total(transcript)
    tol = tol_per_round * max(T, 1)
    rows = []
    for i, h in enumerate(members):
        mc, _ = mc_error(transcript, h)
        regret = float(played.sum() - F[:, i].sum())
        rhs = regret + eps_sum + tol
        rows.append(LedgerRow(name=h.name, mc=mc, regret=regret,
                              eps_sum=eps_sum, rhs=rhs, ok=mc <= rhs,
                              slack=rhs - mc))
    return rows


def linear_round_gradients(transcript: Transcript, fmap: FeatureMap) -> np.ndarray:
    """G[t] = -E_{p ~ solved}[Psi(x_t,p)(y_t-p)], recomputed per round."""
    _require_resolved(transcript)
    G = np.zeros((len(transcript.rounds), fmap.rows))
    for ti, r in enumerate(transcript.rounds):
        u = np.zeros(fmap.rows)
        for w, p in zip(r.solved_weights, r.solved_points):
            u += w * (fmap(r.x, p) @ (r.y - p))
        G[ti] = -u
    return G


def linear_reduction_ledger(transcript: Transcript, fmap: FeatureMap,
                            thetas: np.ndarray,
                            tol_per_round: float = 1e-8) -> list[LedgerRow]:
    G = linear_round_gradients(transcript, fmap)
    T = len(transcript.rounds)
    theta_played = np.array([r.params for r in transcript.rounds]) if T else np.zeros((0, fmap.rows))
    played = float(np.einsum("tr,tr->", G, theta_played))
    gsum = G.sum(axis=0)
    eps_sum = evi_total(transcript)
    tol = tol_per_round * max(T, 1)
    rows = []
    for j, theta in enumerate(np.atleast_2d(thetas)):
        mc = -float(gsum @ theta)
        regret = played - float(gsum @ theta)
        rhs = regret + eps_sum + tol
        rows.append(LedgerRow(name=f"theta[{j}]", mc=mc, regret=regret,
                              eps_sum=eps_sum, rhs=rhs, ok=mc <= rhs,
                              slack=rhs - mc))
    return rows


def sphere_comparators(rows: int, radius: float, seed: int,
                       count: int = 100) -> np.ndarray:
    """count seeded directions on the radius-sphere plus +-radius basis."""
    rng = derive_rng(seed, 0x41554449)
    pts = rng.normal(size=(count, rows))
    pts /= np.maximum(np.linalg.norm(pts, axis=1, keepdims=True), 1e-300)
    basis = np.vstack([np.eye(rows), -np.eye(rows)])
    return np.vstack([pts, basis]) * radius


def per_round_evi_inequality(transcript: Transcript, values_at,
                             tol: float = 1e-9) -> float:
    """max violation of E[h_t(y_t-p)] <= eps_realized over rounds (the
    certificate holds for every y, so in particular the realized one)."""
    _require_resolved(transcript)
    worst = -np.inf
    for i, r in enumerate(transcript.rounds):
        vals = values_at(i, r, r.solved_points)
        got = float(np.einsum("a,ad,ad->", r.solved_weights, vals,
                              r.y[None, :] - r.solved_points))
        worst = max(worst, got - r.eps_realized)
    return worst  # <= tol means the invariant holds


def finite_values_builder(members: Sequence[TestFunction]):
    def values_at(i, r, P):
        acc = np.zeros_like(P)
        for lam_i, h in zip(r.params, members):
            if lam_i != 0.0:
                acc += lam_i * values_of(h, r.x, P)
        return acc
    return values_at


def linear_values_builder(fmap: FeatureMap):
    def values_at(i, r, P):
        return np.array([fmap(r.x, p).T @ r.params for p in P])
    return values_at


class K29ValuesBuilder:
    """Replays the kernel history; rounds must be visited in order."""

    def __init__(self, transcript: Transcript, kernel, context_dim: int):
        self.kernel = kernel
        self.history = kernel.make_history(context_dim)
        self.transcript = transcript
        self._next = 0

    def __call__(self, i, r, P):
        if i != self._next:
            raise ContractError("k29 replay must visit rounds in order")
        op = self.history.operator(r.x)
        vals = np.array([r.alpha * op(p) for p in P])
        self.history.absorb(r.x, r.points, r.weights, r.y)
        self._next += 1
        return vals


def certificate_audit(transcript: Transcript, values_at, body: ConvexBody,
                      seed: int = 0, ball_samples: int = 10_000,
                      slack: float = 1e-9):
    """Criterion-grade recheck: the recomputed certificate of every round's
    solved distribution matches eps_realized, is exact against vertex
    enumeration on polytopes, and dominates sampled maxima on balls.
    Returns (max |gap - recorded|, max sampled exceedance)."""
    _require_resolved(transcript)
    rng = derive_rng(seed, 0x43455254)
    max_dev = 0.0
    max_exceed = -np.inf
    vertices = body.vertices() if body.is_polytope else None
    samples = None
    if not body.is_polytope:
        samples = np.array([body.sample(rng) for _ in range(ball_samples)])
    for i, r in enumerate(transcript.rounds):
        vals = values_at(i, r, r.solved_points)
        a = vals.T @ r.solved_weights
        b = float(np.einsum("ad,ad->", vals * r.solved_weights[:, None],
                            r.solved_points))
        gap = float(a @ body.linopt(-a)) - b
        max_dev = max(max_dev, abs(gap - r.eps_realized))
        if vertices is not None:
            enum = max(float(a @ v) for v in vertices) - b
            max_dev = max(max_dev, abs(enum - gap))
        else:
            sampled = float(np.max(samples @ a)) - b
            max_exceed = max(max_exceed, sampled - gap)
    return max_dev, max_exceed


def ftrl_alpha_probe(transcript: Transcript, fmap: FeatureMap, radius: float,
                     grad_sq_budget: float, body: ConvexBody,
                     probes_per_round: int = 50, seed: int = 0) -> float:
    """Rebuild the gradient sum from the transcript and compare the played
    function against alpha_t * S_t at random probe points.  Returns the
    max of |h_t(p) - alpha_t S_t(p)| / (1 + |S_t(p)|) over all probes."""
    _require_resolved(transcript)
    rng = derive_rng(seed, 0x50524F42)
    eta = 2.0 * radius / math.sqrt(grad_sq_budget)
    s = np.zeros(fmap.rows)
    worst = 0.0
    for r in transcript.rounds:
        theta_closed, alpha = ftrl_ball_step(s, eta, radius)
        for _ in range(probes_per_round):
            p = body.sample(rng)
            psi = fmap(r.x, p)
            h_played = psi.T @ r.params
            s_val = psi.T @ s
            dev = float(np.linalg.norm(h_played - alpha * s_val))
            worst = max(worst, dev / (1.0 + float(np.linalg.norm(s_val))))
        for w, p in zip(r.solved_weights, r.solved_points):
            s += w * (fmap(r.x, p) @ (r.y - p))
    return worst


def k29_norm_audit(transcript: Transcript, kernel, context_dim: int):
    """Recompute per-round (cross, w) by replaying the history over the
    played distributions; returns (w_series, eps_op_series, norm2_final)."""
    _require_resolved(transcript)
    hist = kernel.make_history(context_dim)
    w_series = np.zeros(len(transcript.rounds))
    eps_op = np.zeros(len(transcript.rounds))
    norm2 = 0.0
    for i, r in enumerate(transcript.rounds):
        cross, w_t = hist.absorb(r.x, r.points, r.weights, r.y)
        norm2 += 2.0 * cross + w_t
        w_series[i] = w_t
        alpha = r.alpha
        if math.isnan(alpha):
            raise ContractError("round lacks the trust coefficient")
        eps_op[i] = r.eps_realized / alpha if alpha > 0 else 0.0
    return w_series, eps_op, norm2


def censored_ledger(transcript: Transcript, members: Sequence[TestFunction],
                    gamma: float, loss_bound: float,
                    tol_per_round: float = 1e-8) -> list[LedgerRow]:
    """Effective-mixture MC-Err against gamma*L*T + sum eps + realized
    importance-weighted regret, per member."""
    F = finite_loss_matrix(transcript, members)  # solved-dist losses
    T = len(transcript.rounds)
    zs = np.array([r.z for r in transcript.rounds], dtype=float)
    iw = zs / gamma
    lam = np.array([r.params for r in transcript.rounds]) if T else np.zeros((0, len(members)))
    played_iw = np.einsum("ti,ti,t->", lam, F, iw) if T else 0.0
    eps_sum = evi_total(transcript)
    tol = tol_per_round * max(T, 1)
    rows = []
    for i, h in enumerate(members):
        mc, _ = mc_error(transcript, h)  # played = effective mixture
        iw_regret = float(played_iw - (F[:, i] * iw).sum())
        rhs = gamma * loss_bound * T + eps_sum + iw_regret + tol
        rows.append(LedgerRow(name=h.name, mc=mc, regret=iw_regret,
                              eps_sum=eps_sum, rhs=rhs, ok=mc <= rhs,
                              slack=rhs - mc))
    return rows


def censored_decomposition_check(transcript: Transcript,
                                 h: TestFunction, gamma: float,
                                 exploration: FiniteSupportDistribution) -> float:
    """|MC(effective) - [(1-gamma) * solved term + gamma * exploration term]|."""
    _require_resolved(transcript)
    total_eff, _ = mc_error(transcript, h)
    solved = 0.0
    expl = 0.0
    for r in transcript.rounds:
        resid_s = r.y[None, :] - r.solved_points
        vals_s = values_of(h, r.x, r.solved_points)
        solved += float(np.einsum("a,ad,ad->", r.solved_weights, vals_s, resid_s))
        resid_e = r.y[None, :] - exploration.points
        vals_e = values_of(h, r.x, exploration.points)
        expl += float(np.einsum("a,ad,ad->", exploration.weights, vals_e, resid_e))
    return abs(total_eff - ((1.0 - gamma) * solved + gamma * expl))


def uniform_round_mixture(transcript: Transcript,
                          body: ConvexBody) -> FiniteSupportDistribution:
    """Uniform-over-rounds mixture of the played distributions; the
    adversary construction makes this an EVI solution for the target.
    Byte-equal atoms are merged so the support stays manageable."""
    if not transcript.rounds:
        raise ContractError("empty transcript")
    T = len(transcript.rounds)
    slot: dict[bytes, int] = {}
    pts: list[np.ndarray] = []
    wts: list[float] = []
    for r in transcript.rounds:
        for w, p in zip(r.weights, r.points):
            key = p.tobytes()
            j = slot.get(key)
            if j is None:
                slot[key] = len(pts)
                pts.append(p)
                wts.append(w / T)
            else:
                wts[j] += w / T
    w = np.array(wts)
    return FiniteSupportDistribution(body, np.array(pts), w / w.sum())
