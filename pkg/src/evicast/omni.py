"""Omniprediction: one forecast stream serving many losses at once.

Outcomes are one-hot vectors on the k-simplex.  A loss is a nonnegative
table over (action, outcome); the post-processor picks the action
minimizing expected loss under the forecast point.  Calibrating against

    h_loss(x, p)       = loss row chosen by the post-processor at p
    h_{loss,rule}(x,p) = - loss row chosen by the comparator rule at x

yields, for every loss and rule, the chain

    realized(post) = middle(post) + MC(h_loss)            (identity)
    middle(post)  <= middle(rule)                         (optimality, exact)
    middle(rule)   = realized(rule) + MC(h_{loss,rule})   (identity)

where middle means expected loss under the forecast distribution, so the
regret against any rule is at most the sum of two calibration errors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError
from .forecaster import ReductionEngine, Transcript, mc_error, FiniteTestFamily
from .geometry import ConvexBody, simplex
from .testfns import TestFunction


@dataclass(frozen=True)
class LossSpec:
    """Nonnegative loss table, rows = actions, columns = outcomes."""

    name: str
    table: np.ndarray

    @property
    def n_actions(self) -> int:
        return self.table.shape[0]

    @property
    def k(self) -> int:
        return self.table.shape[1]


def loss_table(name: str, table) -> LossSpec:
    table = np.asarray(table, dtype=float)
    if table.ndim != 2 or table.shape[0] < 1:
        raise ContractError("loss table must be 2-d with at least one action")
    if np.any(table < 0.0):
        raise ContractError("loss tables are nonnegative")
    return LossSpec(name=name, table=table)


@dataclass(frozen=True)
class DecisionRule:
    """Maps the context to an action index."""

    name: str
    fn: Callable[[np.ndarray], int]


def finite_context_rule(name: str, mapping) -> DecisionRule:
    """Rule over integer contexts: action = mapping[int(x[0])]."""
    mapping = np.asarray(mapping, dtype=int)
    return DecisionRule(name=name,
                        fn=lambda x, m=mapping: int(m[int(round(float(np.ravel(x)[0])))]))


def _choose(table: np.ndarray, P: np.ndarray) -> np.ndarray:
    """Row-wise expected-loss minimizers, lowest index on ties.  Every
    caller routes through this so selections agree bitwise."""
    return np.argmin(P @ table.T, axis=1)


def post_process(loss: LossSpec, p: np.ndarray) -> int:
    p = np.asarray(p, dtype=float)
    return int(_choose(loss.table, p[None, :])[0])


def _post_test(loss: LossSpec) -> TestFunction:
    table = loss.table
    bound = float(np.max(np.linalg.norm(table, axis=1)))

    def fn_batch(x, P):
        return table[_choose(table, np.asarray(P, dtype=float))]

    return TestFunction(name=f"post[{loss.name}]",
                        fn=lambda x, p: fn_batch(x, p[None, :])[0],
                        fn_batch=fn_batch, bound=bound, dim=loss.k)


def _rule_test(loss: LossSpec, rule: DecisionRule) -> TestFunction:
    table = loss.table
    bound = float(np.max(np.linalg.norm(table, axis=1)))

    def fn(x, p):
        return -table[rule.fn(x)]

    def fn_batch(x, P):
        return np.tile(-table[rule.fn(x)], (len(P), 1))

    return TestFunction(name=f"rule[{loss.name}|{rule.name}]", fn=fn,
                        fn_batch=fn_batch, bound=bound, dim=loss.k)


def build_omni_tests(losses: Sequence[LossSpec],
                     rules: Sequence[DecisionRule]) -> list[TestFunction]:
    """|L| post-processor tests plus |L| x |C| comparator tests."""
    k = losses[0].k
    if any(l.k != k for l in losses):
        raise ContractError("losses must share the outcome count")
    out = [_post_test(l) for l in losses]
    out += [_rule_test(l, c) for l in losses for c in rules]
    return out


def omni_engine(losses: Sequence[LossSpec], rules: Sequence[DecisionRule],
                horizon: int, seed: int = 0, **engine_kw) -> ReductionEngine:
    members = build_omni_tests(losses, rules)
    body = simplex(losses[0].k)
    fam = FiniteTestFamily(members, body, horizon)
    return ReductionEngine(body, fam, seed=seed, **engine_kw)


# -- audits --------------------------------------------------------------------

def _loss_terms(transcript: Transcript, loss: LossSpec):
    """(realized, middle) for the post-processor: expectations over the
    played atoms, outcomes one-hot so row @ y is the realized entry."""
    realized = 0.0
    middle = 0.0
    for r in transcript.rounds:
        rows = loss.table[_choose(loss.table, r.points)]
        realized += float(np.einsum("a,ad,d->", r.weights, rows, r.y))
        middle += float(np.einsum("a,ad,ad->", r.weights, rows, r.points))
    return realized, middle


def _rule_terms(transcript: Transcript, loss: LossSpec, rule: DecisionRule):
    realized = 0.0
    middle = 0.0
    for r in transcript.rounds:
        row = loss.table[rule.fn(r.x)]
        realized += float(row @ r.y)
        middle += float(r.weights @ (r.points @ row))
    return realized, middle


def omni_regret(transcript: Transcript, losses: Sequence[LossSpec],
                rules: Sequence[DecisionRule]):
    """max over losses of realized post-processor loss minus the best
    rule's realized loss (brute-force minimum over the rule class)."""
    worst = -np.inf
    detail = {}
    for loss in losses:
        realized, _ = _loss_terms(transcript, loss)
        best = min(_rule_terms(transcript, loss, c)[0] for c in rules)
        detail[loss.name] = realized - best
        worst = max(worst, realized - best)
    return worst, detail


@dataclass
class OmniRow:
    loss: str
    rule: str
    post_identity: float   # |realized(post) - middle(post) - MC(h_loss)|
    middle_gap: float      # middle(rule) - middle(post), >= 0 exactly
    rule_identity: float   # |middle(rule) - realized(rule) - MC(h_{loss,rule})|
    regret: float
    mc_post: float
    mc_rule: float
    ok: bool


def omni_ledger(transcript: Transcript, losses: Sequence[LossSpec],
                rules: Sequence[DecisionRule],
                tol: float = 1e-9) -> list[OmniRow]:
    """Per (loss, rule): the two identities, the exact optimality gap, and
    regret <= MC(h_loss) + MC(h_{loss,rule}) + tol."""
    T = max(len(transcript.rounds), 1)
    rows = []
    for loss in losses:
        mc_post, _ = mc_error(transcript, _post_test(loss))
        realized_p, middle_p = _loss_terms(transcript, loss)
        for rule in rules:
            mc_rule, _ = mc_error(transcript, _rule_test(loss, rule))
            realized_c, middle_c = _rule_terms(transcript, loss, rule)
            post_id = abs(realized_p - middle_p - mc_post)
            rule_id = abs(middle_c - realized_c - mc_rule)
            gap = middle_c - middle_p
            regret = realized_p - realized_c
            ok = (post_id <= tol * T and rule_id <= tol * T
                  and gap >= -tol and regret <= mc_post + mc_rule + tol * T)
            rows.append(OmniRow(loss=loss.name, rule=rule.name,
                                post_identity=post_id, middle_gap=gap,
                                rule_identity=rule_id, regret=regret,
                                mc_post=mc_post, mc_rule=mc_rule, ok=ok))
    return rows


def one_hot(k: int, j: int) -> np.ndarray:
    out = np.zeros(k)
    out[int(j)] = 1.0
    return out
