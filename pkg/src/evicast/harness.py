"""Experiment harness: configs, natures, runners, reports, and plots.

Configs are JSON trees (see README for the grammar).  A run writes into
its output directory:

    transcript.json / transcript.csv   full per-round record
    metrics.csv                        per-round scalar series
    report.json                        ledger rows, hashes, pass/fail
    plots.svg                          data-faithful series plot

run_experiment returns the report; ok=False means a ledger row failed,
which the CLI maps to a nonzero exit code.
"""

from __future__ import annotations

import dataclasses
import json
import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .decision import (DecisionTranscript, best_response_batch,
                       finite_swap_engine, linear_deviations,
                       linear_swap_engine, max_linear_swap_regret, phi_regret,
                       swap_values_builder, vertex_swap_deviations)
from .errors import ConfigError, ContractError
from .forecaster import (CensoredEngine, K29Engine, K29ValuesBuilder,
                         FiniteTestFamily, LinearTestFamily, ReductionEngine,
                         Transcript, censored_ledger, evi_adversary,
                         finite_reduction_ledger, finite_values_builder,
                         linear_values_builder, mc_error,
                         per_round_evi_inequality, sphere_comparators,
                         linear_reduction_ledger)
from .geometry import (ConvexBody, FiniteSupportDistribution, body_from_spec,
                       box, simplex)
from .omni import (finite_context_rule, loss_table, omni_engine, omni_ledger,
                   omni_regret, one_hot)
from .rng import NATURE, derive_rng
from .testfns import (affine_family_from_tables, gaussian_kernel,
                      linear_kernel, monomial_feature_map, polynomial_kernel)

_KINDS = ("standard", "k29", "censored", "decision", "omni", "self_play")
_KEYS = {"kind", "horizon", "seed", "eps_policy", "body", "family", "nature",
         "delays", "gamma", "kernel", "context_dim", "radius", "losses",
         "rules", "game", "label", "loss_body"}


@dataclass
class ExperimentConfig:
    kind: str
    horizon: int
    seed: int = 0
    eps_policy: str = "default"
    body: dict = field(default_factory=lambda: {"kind": "simplex", "dim": 3})
    family: dict = field(default_factory=lambda: {"kind": "affine", "count": 4})
    nature: dict = field(default_factory=lambda: {"kind": "iid"})
    delays: object = 1
    gamma: Optional[float] = None
    kernel: Optional[dict] = None
    context_dim: int = 1
    radius: float = 1.0
    losses: list = field(default_factory=list)
    rules: list = field(default_factory=list)
    game: Optional[dict] = None
    label: str = "run"
    loss_body: Optional[dict] = None


def config_from_dict(d: dict) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(d) - _KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kind = d.get("kind")
    if kind not in _KINDS:
        raise ConfigError(f"kind must be one of {_KINDS}, got {kind!r}")
    if "horizon" not in d or int(d["horizon"]) < 0:
        raise ConfigError("horizon is required and must be >= 0")
    cfg = ExperimentConfig(kind=kind, horizon=int(d["horizon"]))
    for key, value in d.items():
        if key not in ("kind", "horizon"):
            setattr(cfg, key, value)
    cfg.seed = int(cfg.seed)
    return cfg


def config_from_file(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return config_from_dict(data)


# -- natures -------------------------------------------------------------------

class IidNature:
    non_adaptive = True

    def __init__(self, body: ConvexBody, seed: int):
        self.body = body
        self.rng = derive_rng(seed, NATURE)

    def context(self, t):
        return np.zeros(1)

    def outcome(self, t, x, dist):
        return self.body.sample(self.rng)


class FixedSequenceNature:
    non_adaptive = True

    def __init__(self, outcomes, contexts=None):
        self.outcomes = np.asarray(outcomes, dtype=float)
        self.contexts = None if contexts is None else np.asarray(contexts, float)

    def context(self, t):
        if self.contexts is None:
            return np.zeros(1)
        return self.contexts[t - 1]

    def outcome(self, t, x, dist):
        return self.outcomes[t - 1]


class MeanNature:
    """Plays the projected barycenter of the forecast: adaptive but tame."""

    non_adaptive = False

    def __init__(self, body: ConvexBody):
        self.body = body

    def context(self, t):
        return np.zeros(1)

    def outcome(self, t, x, dist):
        return self.body.project(dist.mean())


class OneHotNature:
    non_adaptive = True

    def __init__(self, k: int, seed: int, n_contexts: int = 4):
        self.k = k
        self.n_contexts = n_contexts
        self.rng = derive_rng(seed, NATURE)

    def context(self, t):
        return np.array([float(t % self.n_contexts)])

    def outcome(self, t, x, dist):
        bias = (1.0 + float(x[0])) / (self.n_contexts + 1.0)
        probs = np.full(self.k, (1.0 - bias) / max(self.k - 1, 1))
        probs[0] = bias
        probs /= probs.sum()
        return one_hot(self.k, self.rng.choice(self.k, p=probs))


def random_affine_members(body: ConvexBody, count: int, seed: int,
                          scale: float = 0.25):
    """Seeded affine tests closed under negation, bounds <= 2 * scale-ish."""
    rng = derive_rng(seed, 0x46414D49)
    d = body.dim
    mats, offs = [], []
    for _ in range(count):
        m = rng.normal(size=(d, d))
        m *= scale / max(1.0, float(np.linalg.norm(m, 2)))
        c = rng.normal(size=d)
        c *= 0.25 * scale / max(1.0, float(np.linalg.norm(c)))
        mats += [m, -m]
        offs += [c, -c]
    return affine_family_from_tables(np.array(mats), np.array(offs),
                                     outer_radius=body.outer_radius)


def _build_nature(cfg: ExperimentConfig, body: ConvexBody, members):
    spec = dict(cfg.nature or {})
    kind = spec.pop("kind", "iid")
    if kind == "iid":
        return IidNature(body, int(spec.get("seed", cfg.seed + 1)))
    if kind == "fixed_sequence":
        return FixedSequenceNature(spec["outcomes"], spec.get("contexts"))
    if kind == "mean":
        return MeanNature(body)
    if kind == "adaptive_worstcase":
        idx = int(spec.get("member", 0))
        if not members:
            raise ConfigError("adaptive_worstcase needs a finite family")
        return evi_adversary(members[idx], np.zeros(1), body)
    raise ConfigError(f"unknown nature kind {kind!r}")


def _build_kernel(spec: dict, dim: int):
    spec = dict(spec or {})
    kind = spec.pop("kind", "gaussian")
    if kind == "gaussian":
        return gaussian_kernel(dim=dim, bandwidth=float(spec.get("bandwidth", 0.5)),
                               input_bound=float(spec.get("input_bound", 2.0)))
    if kind == "linear":
        return linear_kernel(dim=dim, c0=float(spec.get("c0", 0.0)),
                             input_bound=float(spec.get("input_bound", 2.0)))
    if kind == "poly":
        return polynomial_kernel(dim=dim, power=int(spec.get("power", 2)),
                                 c0=float(spec.get("c0", 1.0)),
                                 input_bound=float(spec.get("input_bound", 2.0)))
    raise ConfigError(f"unknown kernel kind {kind!r}")


# -- reporting ------------------------------------------------------------------

def _metrics_rows(tr: Transcript):
    rows = []
    for r in tr.rounds:
        rows.append({"t": r.t, "eps_target": r.eps_target,
                     "eps_realized": r.eps_realized,
                     "hit_cap": int(r.hit_cap), "atoms": len(r.weights)})
    return rows


def _write_metrics(rows, path):
    import csv as _csv
    with open(path, "w", newline="") as fh:
        names = ["t", "eps_target", "eps_realized", "hit_cap", "atoms"]
        w = _csv.DictWriter(fh, fieldnames=names)
        w.writeheader()
        for row in rows:
            w.writerow(row)


def emit_plots(series: dict, path, title: str = "run") -> None:
    """One SVG, one polyline per series; the raw points ride along in each
    polyline's desc element as JSON so the plot stays machine-readable."""
    W, H, M = 640, 360, 42
    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg",
                     width=str(W), height=str(H),
                     viewBox=f"0 0 {W} {H}")
    ET.SubElement(svg, "title").text = title
    ET.SubElement(svg, "rect", x="0", y="0", width=str(W), height=str(H),
                  fill="white")
    ET.SubElement(svg, "line", x1=str(M), y1=str(H - M), x2=str(W - M),
                  y2=str(H - M), stroke="black")
    ET.SubElement(svg, "line", x1=str(M), y1=str(M), x2=str(M),
                  y2=str(H - M), stroke="black")
    drawable = {k: (np.asarray(xs, float), np.asarray(ys, float))
                for k, (xs, ys) in series.items()
                if len(xs) and len(xs) == len(ys)}
    if drawable:
        all_x = np.concatenate([xs for xs, _ in drawable.values()])
        all_y = np.concatenate([ys for _, ys in drawable.values()])
        x0, x1 = float(all_x.min()), float(all_x.max())
        y0, y1 = float(all_y.min()), float(all_y.max())
        xspan = (x1 - x0) or 1.0
        yspan = (y1 - y0) or 1.0
        colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b"]
        for i, (name, (xs, ys)) in enumerate(sorted(drawable.items())):
            px = M + (xs - x0) / xspan * (W - 2 * M)
            py = H - M - (ys - y0) / yspan * (H - 2 * M)
            pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
            pl = ET.SubElement(svg, "polyline", points=pts, fill="none",
                               stroke=colors[i % len(colors)])
            pl.set("data-name", name)
            ET.SubElement(pl, "desc").text = json.dumps(
                {"name": name, "x": xs.tolist(), "y": ys.tolist()})
        for i, name in enumerate(sorted(drawable)):
            label = ET.SubElement(svg, "text", x=str(M + 8),
                                  y=str(M + 14 + 16 * i),
                                  fill=colors[i % len(colors)])
            label.set("font-size", "12")
            label.text = name
    ET.ElementTree(svg).write(path)


def _json_default(o):
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)!r}")


@dataclass
class ExperimentResult:
    ok: bool
    report: dict
    out_dir: str


def _finalize(cfg, out_dir, tr: Transcript, ledger_rows, extra=None,
              decision: Optional[DecisionTranscript] = None):
    os.makedirs(out_dir, exist_ok=True)
    tr.write_json(os.path.join(out_dir, "transcript.json"))
    tr.write_csv(os.path.join(out_dir, "transcript.csv"))
    rows = _metrics_rows(tr)
    _write_metrics(rows, os.path.join(out_dir, "metrics.csv"))
    ts = np.array([r["t"] for r in rows], dtype=float)
    eps = np.array([r["eps_realized"] for r in rows], dtype=float)
    emit_plots({"eps_realized": (ts, eps),
                "eps_cumulative": (ts, np.cumsum(eps))},
               os.path.join(out_dir, "plots.svg"), title=cfg.label)
    if decision is not None:
        decision.write_json(os.path.join(out_dir, "decision.json"))
    ledger = [dataclasses.asdict(r) if dataclasses.is_dataclass(r) else dict(r)
              for r in ledger_rows]
    ok = all(bool(r.get("ok", True)) for r in ledger)
    report = {"kind": cfg.kind, "label": cfg.label, "horizon": cfg.horizon,
              "seed": cfg.seed, "transcript_sha256": tr.sha256(),
              "ledger": ledger, "ok": ok}
    if decision is not None:
        report["decision_sha256"] = decision.sha256()
    if extra:
        report.update(extra)
        ok = ok and all(bool(v) for k, v in extra.items() if k.endswith("_ok"))
        report["ok"] = ok
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, default=_json_default)
    return ExperimentResult(ok=ok, report=report, out_dir=out_dir)


# -- runners --------------------------------------------------------------------

def _run_standard(cfg: ExperimentConfig, out_dir: str) -> ExperimentResult:
    body = body_from_spec(cfg.body)
    fspec = dict(cfg.family or {})
    fkind = fspec.pop("kind", "affine")
    if fkind == "affine":
        members = random_affine_members(body, int(fspec.get("count", 4)),
                                        int(fspec.get("seed", cfg.seed)),
                                        float(fspec.get("scale", 0.25)))
        fam = FiniteTestFamily(members, body, cfg.horizon)
        values_at = finite_values_builder(members)
    elif fkind == "monomial":
        fmap = monomial_feature_map(cfg.context_dim, body.dim,
                                    int(fspec.get("degree", 1)),
                                    input_bound=max(1.0, body.outer_radius))
        radius = float(fspec.get("radius", 1.0))
        budget = cfg.horizon * (fmap.bound * body.diameter_bound) ** 2
        members = []
        fam = LinearTestFamily(fmap, radius, budget)
        values_at = linear_values_builder(fmap)
    else:
        raise ConfigError(f"unknown family kind {fkind!r}")
    nature = _build_nature(cfg, body, members)
    eng = ReductionEngine(body, fam, seed=cfg.seed, eps_policy=cfg.eps_policy,
                          delays=cfg.delays,
                          header={"label": cfg.label, "kind": cfg.kind})
    tr = eng.run(nature, cfg.horizon)
    if fkind == "affine":
        rows = finite_reduction_ledger(tr, members)
    else:
        thetas = sphere_comparators(fam.fmap.rows, radius, seed=cfg.seed)
        rows = linear_reduction_ledger(tr, fam.fmap, thetas)
    worst = per_round_evi_inequality(tr, values_at) if len(tr) else 0.0
    return _finalize(cfg, out_dir, tr, rows,
                     extra={"per_round_evi": worst,
                            "per_round_evi_ok": worst <= 1e-9})


def _run_k29(cfg: ExperimentConfig, out_dir: str) -> ExperimentResult:
    body = body_from_spec(cfg.body)
    kern = _build_kernel(cfg.kernel, body.dim)
    budget = cfg.horizon * (kern.value_bound() * body.diameter_bound**2)
    eng = K29Engine(body, kern, context_dim=cfg.context_dim, radius=cfg.radius,
                    grad_sq_budget=budget, seed=cfg.seed,
                    eps_policy=cfg.eps_policy,
                    header={"label": cfg.label, "kind": cfg.kind})
    tr = eng.run(_build_nature(cfg, body, []), cfg.horizon)
    builder = K29ValuesBuilder(tr, kern, cfg.context_dim)
    worst = per_round_evi_inequality(tr, builder) if len(tr) else 0.0
    return _finalize(cfg, out_dir, tr, [],
                     extra={"per_round_evi": worst,
                            "per_round_evi_ok": worst <= 1e-9})


def _run_censored(cfg: ExperimentConfig, out_dir: str) -> ExperimentResult:
    body = body_from_spec(cfg.body)
    fspec = dict(cfg.family or {})
    members = random_affine_members(body, int(fspec.get("count", 4)),
                                    int(fspec.get("seed", cfg.seed)),
                                    float(fspec.get("scale", 0.25)))
    fam = FiniteTestFamily(members, body, cfg.horizon)
    gamma = float(cfg.gamma if cfg.gamma is not None else 0.25)
    exploration = FiniteSupportDistribution(
        body, np.array([body.project(np.zeros(body.dim))]), np.ones(1))
    eng = CensoredEngine(body, fam, gamma=gamma, exploration=exploration,
                         seed=cfg.seed, eps_policy=cfg.eps_policy,
                         header={"label": cfg.label, "kind": cfg.kind})
    nature = _build_nature(cfg, body, members)
    if not getattr(nature, "non_adaptive", False):
        raise ConfigError("censored runs need a non-adaptive nature")
    tr = eng.run(nature, cfg.horizon)
    loss_bound = max(h.bound for h in members) * body.diameter_bound
    rows = censored_ledger(tr, members, gamma, loss_bound)
    return _finalize(cfg, out_dir, tr, rows)


def _run_decision(cfg: ExperimentConfig, out_dir: str) -> ExperimentResult:
    action = body_from_spec(cfg.body)
    # losses spanning negatives keep the best response off a single corner
    loss_body = (body_from_spec(cfg.loss_body) if cfg.loss_body
                 else box(np.zeros(action.dim), np.ones(action.dim)))
    fspec = dict(cfg.family or {})
    fkind = fspec.pop("kind", "vertex_swap")
    if fkind == "vertex_swap":
        devs = vertex_swap_deviations(action, cap=fspec.get("cap"),
                                      seed=int(fspec.get("seed", cfg.seed)))
        eng = finite_swap_engine(action, loss_body, devs, cfg.horizon,
                                 seed=cfg.seed, eps_policy=cfg.eps_policy,
                                 header={"label": cfg.label, "kind": cfg.kind})
    elif fkind == "linear":
        devs = linear_deviations(action, count=int(fspec.get("count", 8)),
                                 seed=int(fspec.get("seed", cfg.seed)))
        eng = linear_swap_engine(action, loss_body, cfg.horizon, seed=cfg.seed,
                                 eps_policy=cfg.eps_policy,
                                 header={"label": cfg.label, "kind": cfg.kind})
    else:
        raise ConfigError(f"unknown decision family {fkind!r}")
    nature = _build_nature(cfg, loss_body, [])
    dt = eng.run(nature, cfg.horizon)
    tr = dt.forecasts
    extra = {}
    if fkind == "vertex_swap":
        fam = eng.inner.family
        rows = finite_reduction_ledger(tr, fam.members)
        worst = (per_round_evi_inequality(tr, swap_values_builder(fam))
                 if len(tr) else 0.0)
    else:
        fam = eng.inner.family
        thetas = [np.eye(action.dim).reshape(-1) - d.mat.reshape(-1)
                  for d in devs]
        rows = linear_reduction_ledger(tr, fam.fmap, thetas)
        worst = (per_round_evi_inequality(tr, linear_values_builder(fam.fmap))
                 if len(tr) else 0.0)
    extra["per_round_evi"] = worst
    extra["per_round_evi_ok"] = worst <= 1e-9
    worst_id = 0.0
    worst_slack = -np.inf
    for dev in devs:
        rep = phi_regret(dt, dev)
        worst_id = max(worst_id, abs(rep.total - rep.mc - rep.slack_sum))
        if len(rep.slack_series):
            worst_slack = max(worst_slack, float(rep.slack_series.max()))
    extra["identity_dev"] = worst_id
    extra["identity_ok"] = worst_id <= 1e-9 * max(cfg.horizon, 1)
    extra["slack_max"] = None if worst_slack == -np.inf else worst_slack
    extra["slack_ok"] = worst_slack <= 1e-9
    if action.kind == "simplex":
        value, _ = max_linear_swap_regret(dt, "simplex")
        extra["max_swap_regret"] = value
    return _finalize(cfg, out_dir, tr, rows, extra=extra, decision=dt)


def _run_omni(cfg: ExperimentConfig, out_dir: str) -> ExperimentResult:
    if not cfg.losses or not cfg.rules:
        raise ConfigError("omni runs need losses and rules")
    losses = [loss_table(d["name"], d["table"]) for d in cfg.losses]
    rules = [finite_context_rule(d["name"], d["mapping"]) for d in cfg.rules]
    k = losses[0].k
    eng = omni_engine(losses, rules, cfg.horizon, seed=cfg.seed,
                      eps_policy=cfg.eps_policy,
                      header={"label": cfg.label, "kind": cfg.kind})
    nspec = dict(cfg.nature or {})
    if nspec.get("kind", "iid") == "iid":
        nature = OneHotNature(k, int(nspec.get("seed", cfg.seed + 1)))
    else:
        nature = _build_nature(cfg, simplex(k), eng.family.members)
    tr = eng.run(nature, cfg.horizon)
    rows = omni_ledger(tr, losses, rules)
    worst, detail = omni_regret(tr, losses, rules)
    return _finalize(cfg, out_dir, tr, rows,
                     extra={"omni_regret": worst, "omni_detail": detail})


def rps_game() -> tuple[np.ndarray, np.ndarray]:
    """Cyclic three-action game: 0 for a win, 1/2 for a tie, 1 for a loss.
    Constant-sum, so the column player's table is the transpose."""
    A = np.array([[0.5, 1.0, 0.0],
                  [0.0, 0.5, 1.0],
                  [1.0, 0.0, 0.5]])
    return A, A.T.copy()


@dataclass
class SelfPlayReport:
    horizon: int
    swap_regret: tuple
    ce_gap: float
    identity_dev: float
    joint: np.ndarray
    hashes: tuple

    def jsonable(self):
        return {"horizon": self.horizon,
                "swap_regret": list(self.swap_regret),
                "ce_gap": self.ce_gap, "identity_dev": self.identity_dev,
                "joint": self.joint.tolist(),
                "hashes": list(self.hashes)}


def _ce_violations(joint: np.ndarray, table: np.ndarray, axis: int):
    """Best vertex-map deviation gain on one side of the joint play: axis 0
    remaps the row player of `table`, axis 1 the column player.  The best
    map picks the cheapest replacement per action, so each summand is
    nonnegative."""
    if axis == 0:
        cond = np.einsum("ab,ab->a", joint, table)  # played mass
        alt = joint @ table.T                        # alt[a, a'] deviation mass
    else:
        cond = np.einsum("ab,ab->b", joint, table)
        alt = joint.T @ table                        # alt[b, b']
    series = cond - alt.min(axis=1)
    return float(series.sum()), series


def self_play_game(A: np.ndarray, B: np.ndarray, horizon: int, seed: int = 0,
                   eps_policy: str = "default", solver_config=None):
    """Two swap-calibrated players against each other's expected losses.

    Returns (dt1, dt2, report).  The report's identity_dev certifies that
    the correlated-equilibrium violation of the empirical joint play equals
    each player's swap regret divided by T, computed two independent ways."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    k = A.shape[0]
    if A.shape != (k, k) or B.shape != (k, k):
        raise ContractError("square game tables required")
    action = simplex(k)
    lo, hi = float(min(A.min(), B.min())), float(max(A.max(), B.max()))
    loss_body = box(np.full(k, min(lo, 0.0)), np.full(k, max(hi, 1.0)))
    devs = vertex_swap_deviations(action)
    e1 = finite_swap_engine(action, loss_body, devs, horizon, seed=seed,
                            eps_policy=eps_policy, solver_config=solver_config,
                            header={"player": 1})
    e2 = finite_swap_engine(action, loss_body, devs, horizon, seed=seed + 1,
                            eps_policy=eps_policy, solver_config=solver_config,
                            header={"player": 2})
    x = np.zeros(1)
    joint = np.zeros((k, k))
    for t in range(1, horizon + 1):
        mu1 = e1.phi_round(x)
        mu2 = e2.phi_round(x)
        m1, m2 = mu1.mean(), mu2.mean()
        joint += np.outer(m1, m2)
        e1.phi_observe(A @ m2)
        e2.phi_observe(B.T @ m1)
    e1.finalize()
    e2.finalize()
    joint /= max(horizon, 1)
    dt1, dt2 = e1.transcript, e2.transcript
    sw1, _ = max_linear_swap_regret(dt1, "simplex")
    sw2, _ = max_linear_swap_regret(dt2, "simplex")
    v1, _ = _ce_violations(joint, A, axis=0)
    v2, _ = _ce_violations(joint, B, axis=1)
    T = max(horizon, 1)
    identity_dev = max(abs(v1 - sw1 / T), abs(v2 - sw2 / T))
    report = SelfPlayReport(horizon=horizon, swap_regret=(sw1, sw2),
                            ce_gap=max(v1, v2), identity_dev=identity_dev,
                            joint=joint, hashes=(dt1.sha256(), dt2.sha256()))
    return dt1, dt2, report


def _run_self_play(cfg: ExperimentConfig, out_dir: str) -> ExperimentResult:
    game = cfg.game or {}
    if "A" in game:
        A = np.asarray(game["A"], dtype=float)
        B = np.asarray(game.get("B", A.T), dtype=float)
    else:
        A, B = rps_game()
    dt1, dt2, rep = self_play_game(A, B, cfg.horizon, seed=cfg.seed,
                                   eps_policy=cfg.eps_policy)
    os.makedirs(out_dir, exist_ok=True)
    dt1.write_json(os.path.join(out_dir, "player1.json"))
    dt2.write_json(os.path.join(out_dir, "player2.json"))
    T = max(cfg.horizon, 1)
    ts = np.arange(1, len(dt1.forecasts.rounds) + 1, dtype=float)
    eps1 = np.array([r.eps_realized for r in dt1.forecasts.rounds])
    emit_plots({"eps_player1": (ts, eps1)},
               os.path.join(out_dir, "plots.svg"), title=cfg.label)
    ok = rep.identity_dev <= 1e-9
    report = {"kind": cfg.kind, "label": cfg.label, "horizon": cfg.horizon,
              "seed": cfg.seed, "ok": ok, "self_play": rep.jsonable(),
              "swap_regret_per_round": [rep.swap_regret[0] / T,
                                        rep.swap_regret[1] / T]}
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, default=_json_default)
    return ExperimentResult(ok=ok, report=report, out_dir=out_dir)


_RUNNERS = {"standard": _run_standard, "k29": _run_k29,
            "censored": _run_censored, "decision": _run_decision,
            "omni": _run_omni, "self_play": _run_self_play}


def run_experiment(cfg: ExperimentConfig, out_dir: str) -> ExperimentResult:
    return _RUNNERS[cfg.kind](cfg, out_dir)
