"""Command line front end.

Exit codes: 0 when the run passed its ledgers, 2 when a ledger or audit
failed, 1 for usage or configuration problems.  The default output
directory comes from EVICAST_OUT_DIR, falling back to ./evicast-out.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .decision import (DecisionTranscript, enumerate_vertex_swap_regret,
                       max_linear_swap_regret, phi_regret,
                       vertex_swap_deviations)
from .errors import ConfigError, ContractError, ProtocolError
from .evi import EviProblem, SolverConfig, solve_evi
from .geometry import body_from_spec
from .harness import config_from_file, rps_game, run_experiment, self_play_game
from .testfns import affine_test

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_LEDGER = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _out_dir(args, default_leaf: str) -> str:
    if args.out_dir:
        return args.out_dir
    root = os.environ.get("EVICAST_OUT_DIR", "evicast-out")
    return os.path.join(root, default_leaf)


def _cmd_simulate(args) -> int:
    cfg = config_from_file(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.horizon is not None:
        cfg.horizon = args.horizon
    result = run_experiment(cfg, _out_dir(args, cfg.label))
    print(json.dumps({"ok": result.ok, "out_dir": result.out_dir,
                      "transcript_sha256": result.report.get("transcript_sha256")},
                     indent=2))
    return EXIT_OK if result.ok else EXIT_LEDGER


def _cmd_evi_solve(args) -> int:
    body = body_from_spec(json.loads(args.body))
    mat = np.asarray(json.loads(args.mat), dtype=float)
    off = (np.asarray(json.loads(args.off), dtype=float)
           if args.off else np.zeros(body.dim))
    h = affine_test("cli-operator", mat, off, outer_radius=body.outer_radius)
    problem = EviProblem(body=body, operator=lambda p: mat @ p + off,
                         norm_bound=h.bound + 1e-12, target_eps=args.target,
                         label="cli")
    sol = solve_evi(problem, seed=args.seed, config=SolverConfig())
    payload = {"certified_gap": sol.certified_gap, "target": sol.target_eps,
               "hit_cap": sol.hit_cap, "support": sol.support_size,
               "points": sol.dist.points.tolist(),
               "weights": sol.dist.weights.tolist()}
    print(json.dumps(payload, indent=2))
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(payload, fh, indent=2)
    return EXIT_OK if not sol.hit_cap else EXIT_LEDGER


def _cmd_phi_regret(args) -> int:
    dt = DecisionTranscript.from_json(args.transcript)
    T = max(len(dt), 1)
    report = {"rounds": len(dt)}
    if dt.action_body.kind == "simplex":
        closed, _ = max_linear_swap_regret(dt, "simplex")
        report["max_linear_swap_regret"] = closed
        if args.enumerate:
            brute = enumerate_vertex_swap_regret(dt)
            report["max_vertex_swap_regret"] = brute
            report["closed_vs_brute_dev"] = abs(closed - brute)
    elif dt.action_body.kind == "box":
        closed, _ = max_linear_swap_regret(dt, "box")
        report["max_linear_swap_regret"] = closed
    worst_id = 0.0
    worst_slack = -np.inf
    devs = (vertex_swap_deviations(dt.action_body, cap=args.cap)
            if dt.action_body.kind == "simplex" else [])
    for dev in devs:
        rep = phi_regret(dt, dev)
        worst_id = max(worst_id, abs(rep.total - rep.mc - rep.slack_sum))
        if len(rep.slack_series):
            worst_slack = max(worst_slack, float(rep.slack_series.max()))
    report["identity_dev"] = worst_id
    report["slack_max"] = None if worst_slack == -np.inf else worst_slack
    ok = worst_id <= 1e-9 * T and (worst_slack == -np.inf or worst_slack <= 1e-9)
    report["ok"] = ok
    print(json.dumps(report, indent=2))
    return EXIT_OK if ok else EXIT_LEDGER


def _cmd_omnipredict(args) -> int:
    cfg = config_from_file(args.config)
    if cfg.kind != "omni":
        raise ConfigError("omnipredict needs a config with kind \"omni\"")
    if args.seed is not None:
        cfg.seed = args.seed
    if args.horizon is not None:
        cfg.horizon = args.horizon
    result = run_experiment(cfg, _out_dir(args, cfg.label))
    print(json.dumps({"ok": result.ok, "out_dir": result.out_dir,
                      "omni_regret": result.report.get("omni_regret")},
                     indent=2))
    return EXIT_OK if result.ok else EXIT_LEDGER


def _cmd_self_play(args) -> int:
    A, B = rps_game()
    if args.game:
        with open(args.game) as fh:
            spec = json.load(fh)
        A = np.asarray(spec["A"], dtype=float)
        B = np.asarray(spec.get("B", A.T), dtype=float)
    dt1, dt2, rep = self_play_game(A, B, args.horizon, seed=args.seed)
    out = _out_dir(args, "self-play")
    os.makedirs(out, exist_ok=True)
    dt1.write_json(os.path.join(out, "player1.json"))
    dt2.write_json(os.path.join(out, "player2.json"))
    print(json.dumps(rep.jsonable(), indent=2))
    return EXIT_OK if rep.identity_dev <= 1e-9 else EXIT_LEDGER


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="evicast",
                description="Calibrated forecasting, decision audits, and "
                            "experiment ledgers.")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run an experiment config")
    sim.add_argument("--config", required=True)
    sim.add_argument("--seed", type=int)
    sim.add_argument("--horizon", type=int)
    sim.add_argument("--out-dir")
    sim.set_defaults(fn=_cmd_simulate)

    ev = sub.add_parser("evi-solve", help="solve one expected variational "
                                          "inequality for an affine operator")
    ev.add_argument("--body", required=True, help="JSON body spec")
    ev.add_argument("--mat", required=True, help="JSON matrix")
    ev.add_argument("--off", help="JSON offset vector")
    ev.add_argument("--target", type=float, default=1e-3)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--out")
    ev.set_defaults(fn=_cmd_evi_solve)

    pr = sub.add_parser("phi-regret", help="audit a decision transcript")
    pr.add_argument("--transcript", required=True)
    pr.add_argument("--enumerate", action="store_true")
    pr.add_argument("--cap", type=int)
    pr.set_defaults(fn=_cmd_phi_regret)

    om = sub.add_parser("omnipredict", help="run an omniprediction config")
    om.add_argument("--config", required=True)
    om.add_argument("--seed", type=int)
    om.add_argument("--horizon", type=int)
    om.add_argument("--out-dir")
    om.set_defaults(fn=_cmd_omnipredict)

    sp = sub.add_parser("self-play", help="play two calibrated players "
                                          "against each other")
    sp.add_argument("--horizon", type=int, default=1000)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--game", help="JSON file with tables A and optional B")
    sp.add_argument("--out-dir")
    sp.set_defaults(fn=_cmd_self_play)
    return p


def entry(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        code = args.fn(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    except (ContractError, ProtocolError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    return code


if __name__ == "__main__":
    raise SystemExit(entry())
