"""No-regret learners over linear losses.

All learners share a two-call contract: ``next()`` returns the current
parameters before any round-t information arrives, and ``feed`` consumes
the round's linear loss afterwards.  Realized regret is never read off
internal state; audits recompute it from transcripts.

Included: multiplicative weights over a finite index set (fixed-horizon
rate, plus a doubling-trick variant for unknown horizons), projected
online gradient descent over a body, a lazy regularized-leader rule on a
Euclidean ball with a closed-form solution, a delayed-delivery gradient
variant, and an importance-weighting wrapper for censored feedback.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ContractError
from .geometry import ConvexBody, as_vector


@dataclass(frozen=True)
class LinearLoss:
    """A linear loss theta -> <gradient, theta>, with a provenance tag."""

    gradient: np.ndarray
    tag: str = ""

    def __post_init__(self):
        g = as_vector(self.gradient, name="loss gradient")
        g.setflags(write=False)
        object.__setattr__(self, "gradient", g)


# ----------------------------------------------------------------------
# multiplicative weights

def hedge_step(weights: np.ndarray, loss: np.ndarray, eta: float) -> np.ndarray:
    """One exponential-weights update, max-shifted before normalizing."""
    weights = as_vector(weights, name="weights")
    loss = as_vector(loss, weights.shape[0], "loss")
    z = -eta * loss
    z -= z.max()
    w = weights * np.exp(z)
    total = w.sum()
    if not np.isfinite(total) or total <= 0.0:
        raise ContractError("hedge update produced a degenerate weight vector")
    return w / total


class Hedge:
    """Exponential weights over n experts.

    The rate is fixed from the declared horizon: eta = sqrt(ln n / T),
    scaled down by the declared per-entry loss bound so the standard
    2 * scale * sqrt(T ln n) regret guarantee applies.
    """

    def __init__(self, n: int, horizon: int, loss_scale: float = 1.0):
        if n < 1 or horizon < 1:
            raise ContractError("Hedge needs n >= 1 and horizon >= 1")
        if loss_scale <= 0:
            raise ContractError("loss_scale must be positive")
        self.n = int(n)
        self.loss_scale = float(loss_scale)
        self.eta = float(np.sqrt(np.log(max(n, 2)) / horizon) / loss_scale)
        self.weights = np.full(self.n, 1.0 / self.n)

    def next(self) -> np.ndarray:
        return self.weights.copy()

    def feed(self, loss) -> None:
        self.weights = hedge_step(self.weights, loss, self.eta)

    def feed_batch(self, losses) -> None:
        if not losses:
            return
        total = np.sum([as_vector(l, self.n, "loss") for l in losses], axis=0)
        self.feed(total)


class HedgeDoubling:
    """Doubling-trick wrapper for unknown horizons: restart with a doubled
    horizon guess whenever the current epoch budget is exhausted."""

    def __init__(self, n: int, loss_scale: float = 1.0, initial_guess: int = 16):
        self.n = int(n)
        self.loss_scale = float(loss_scale)
        self.guess = int(initial_guess)
        self.spent = 0
        self.inner = Hedge(n, self.guess, loss_scale)

    def next(self) -> np.ndarray:
        return self.inner.next()

    def feed(self, loss) -> None:
        if self.spent >= self.guess:
            self.guess *= 2
            self.spent = 0
            self.inner = Hedge(self.n, self.guess, self.loss_scale)
        self.inner.feed(loss)
        self.spent += 1


# ----------------------------------------------------------------------
# projected gradient descent

def ogd_step(theta: np.ndarray, gradient: np.ndarray, eta: float,
             body: ConvexBody) -> np.ndarray:
    theta = as_vector(theta, body.dim, "theta")
    gradient = as_vector(gradient, body.dim, "gradient")
    return body.project(theta - eta * gradient)


class ProjectedGradient:
    """OGD over a body with a constant step size chosen by the caller."""

    def __init__(self, body: ConvexBody, eta: float, theta0=None):
        if eta <= 0 or not np.isfinite(eta):
            raise ContractError("step size must be positive and finite")
        self.body = body
        self.eta = float(eta)
        start = np.zeros(body.dim) if theta0 is None else as_vector(theta0, body.dim)
        self.theta = body.project(start)

    def next(self) -> np.ndarray:
        return self.theta.copy()

    def feed(self, gradient) -> None:
        self.theta = ogd_step(self.theta, gradient, self.eta, self.body)

    def feed_batch(self, gradients) -> None:
        # delivered batches are summed and applied with a single projection
        if not gradients:
            return
        total = np.sum([as_vector(g, self.body.dim) for g in gradients], axis=0)
        self.feed(total)


# ----------------------------------------------------------------------
# lazy regularized leader on a Euclidean ball

def ftrl_ball_step(grad_sum: np.ndarray, eta: float, radius: float):
    """Closed form of argmin over the radius-ball of
    eta * <grad_sum_of_losses, theta> + ||theta||^2, phrased with
    s = -(sum of loss gradients): theta = alpha * s with
    alpha = min(eta / 2, radius / ||s||).  Returns (theta, alpha)."""
    s = as_vector(grad_sum, name="gradient sum")
    ns = float(np.linalg.norm(s))
    if ns == 0.0:
        return np.zeros_like(s), eta / 2.0
    alpha = min(eta / 2.0, radius / ns)
    return alpha * s, alpha


class BallRegularizedLeader:
    """Lazy quadratic-regularized leader restricted to a Euclidean ball.

    State is the running sum of negated loss gradients.  With
    eta = 2 * radius / sqrt(loss norm-square budget) the comparator regret
    against any point of the ball is at most
    2 * radius * sqrt(sum ||loss_t||^2) when the budget is honest.
    """

    def __init__(self, dim: int, radius: float, grad_sq_budget: float):
        if radius <= 0 or grad_sq_budget <= 0:
            raise ContractError("radius and budget must be positive")
        self.dim = int(dim)
        self.radius = float(radius)
        self.eta = 2.0 * radius / float(np.sqrt(grad_sq_budget))
        self.s = np.zeros(self.dim)

    def next(self) -> np.ndarray:
        theta, _ = ftrl_ball_step(self.s, self.eta, self.radius)
        return theta

    @property
    def alpha(self) -> float:
        _, a = ftrl_ball_step(self.s, self.eta, self.radius)
        return a

    def feed(self, gradient) -> None:
        g = as_vector(gradient, self.dim, "gradient")
        self.s = self.s - g

    def feed_batch(self, gradients) -> None:
        for g in gradients:
            self.feed(g)


# ----------------------------------------------------------------------
# delayed deliveries

class DelayedGradient:
    """OGD whose gradients arrive late.

    ``feed(loss, delivery_round)`` queues the gradient; when ``next()``
    advances the round counter to a delivery round, all due gradients are
    summed and applied with a single projection.  With every delay equal
    to one this reproduces the plain OGD trajectory exactly.
    """

    def __init__(self, body: ConvexBody, eta: float):
        if eta <= 0 or not np.isfinite(eta):
            raise ContractError("step size must be positive and finite")
        self.body = body
        self.eta = float(eta)
        self.theta = body.project(np.zeros(body.dim))
        self.round = 0
        self.queue: dict[int, list[np.ndarray]] = {}

    def next(self) -> np.ndarray:
        self.round += 1
        due = self.queue.pop(self.round, None)
        if due:
            total = np.sum(due, axis=0)
            self.theta = self.body.project(self.theta - self.eta * total)
        return self.theta.copy()

    def feed(self, loss: LinearLoss, delivery_round: int) -> None:
        if delivery_round <= self.round:
            raise ContractError(
                f"delivery round {delivery_round} is not after emission round {self.round}")
        g = as_vector(loss.gradient, self.body.dim, "gradient")
        self.queue.setdefault(int(delivery_round), []).append(g)

    @property
    def pending(self) -> int:
        return sum(len(v) for v in self.queue.values())


# ----------------------------------------------------------------------
# importance weighting

def importance_weighted_loss(raw_loss, z: int, gamma: float):
    """Unbiased loss estimate (z / gamma) * raw under z ~ Bernoulli(gamma)."""
    if not (0.0 < gamma <= 1.0):
        raise ContractError("gamma must lie in (0, 1]")
    if z not in (0, 1):
        raise ContractError("z must be 0 or 1")
    arr = np.asarray(raw_loss, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ContractError("raw loss must be finite")
    return (z / gamma) * arr


class ImportanceWeightedLearner:
    """Wraps a learner so it sees (z/gamma)-scaled losses; z = 0 rounds
    leave the inner state untouched (the zero loss is a no-op for every
    learner in this module)."""

    def __init__(self, inner, gamma: float):
        if not (0.0 < gamma <= 1.0):
            raise ContractError("gamma must lie in (0, 1]")
        self.inner = inner
        self.gamma = float(gamma)
        self.updates = 0

    def next(self):
        return self.inner.next()

    def feed(self, raw_loss, z: int) -> None:
        scaled = importance_weighted_loss(raw_loss, z, self.gamma)
        if z == 1:
            self.inner.feed(scaled)
            self.updates += 1
