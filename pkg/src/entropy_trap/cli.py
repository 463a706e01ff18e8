"""Command-line front end.

Every command writes its outputs plus ``manifest.json`` into ``--out`` (or
``$ENTROPY_TRAP_OUT``, or the current directory). Failures print one JSON
error object on stderr; exit status 2 marks validation or feasibility
failures, 1 internal errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from . import __version__
from .bifurcation import (
    ExtensionError,
    TargetPolicySpec,
    build_extension,
    verify_extension,
    worst_case_transform,
)
from .environments import (
    GaussianPolicyParams,
    PAPER_GAUSS_B,
    PAPER_GAUSS_G,
    alpha_scaled_toy,
    build_toy,
    chain_mdp,
    discretize_obstacle2d,
    toy_gaussian_values,
)
from .learners import (
    EVAL_SELECTION,
    LOG_FIELDS,
    DualQTables,
    LearnerConfig,
    MdpEnv,
    evaluate_rollouts,
    q_learning,
)
from .mdp import MdpError, dump_mdp, read_mdp, save_mdp, validate
from .solvers import (
    LANDSCAPE_FIELDS,
    landscape_rows,
    plain_value_iteration,
    rows_to_csv,
    soft_value_iteration,
)


class UsageError(Exception):
    code = "usage"


class CheckFailed(Exception):
    """A command ran but its certificate or validation did not pass."""

    def __init__(self, code: str, message: str, detail: dict | None = None):
        super().__init__(message)
        self.code = code
        self.detail = detail or {}


def _out_dir(args) -> Path:
    out = Path(args.out or os.environ.get("ENTROPY_TRAP_OUT") or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=False) + "\n")


def _load_mdp(args):
    if args.alpha is not None or args.gamma_override is not None:
        from dataclasses import replace

        mdp = read_mdp(args.mdp)
        changes = {}
        if args.alpha is not None:
            changes["alpha"] = args.alpha
        if args.gamma_override is not None:
            changes["gamma"] = args.gamma_override
        return replace(mdp, **changes)
    return read_mdp(args.mdp)


def _env_mdp(args):
    if getattr(args, "mdp", None):
        return _load_mdp(args)
    env = args.env
    if env == "toy":
        return build_toy(alpha=args.alpha or 1.0)
    if env == "chain":
        return chain_mdp(args.length, seed=args.chain_seed)
    if env == "trap-chain":
        mdp = chain_mdp(args.length, seed=args.chain_seed)
        extended, _ = worst_case_transform(mdp, args.eta)
        return extended
    if env == "obstacle2d":
        return discretize_obstacle2d(args.grid)
    raise UsageError(f"unknown environment {env!r}")


def _landscape(mdp, alpha, tol, states=None) -> str:
    soft = soft_value_iteration(mdp, alpha, tol)
    plain = plain_value_iteration(mdp, tol)
    return rows_to_csv(landscape_rows(mdp, soft, plain, states), LANDSCAPE_FIELDS)


# -- commands ------------------------------------------------------------------


def cmd_toy(args, out: Path) -> dict:
    alpha = 1.0 if args.alpha is None else args.alpha
    mdp = alpha_scaled_toy(alpha) if args.scaled else build_toy(alpha=alpha)
    dump_mdp(mdp, out / "toy.json")
    (out / "landscape.csv").write_text(_landscape(mdp, mdp.alpha, args.tol))
    return {"files": ["toy.json", "landscape.csv"]}


def cmd_gauss_toy(args, out: Path) -> dict:
    g = GaussianPolicyParams(args.mu_g, args.sigma_g)
    b = GaussianPolicyParams(args.mu_b, args.sigma_b)
    q1, q2 = toy_gaussian_values(g, b, args.alpha if args.alpha is not None else 1.0,
                                 0.99 if args.gamma_override is None else args.gamma_override,
                                 args.samples, args.seed)
    _write_json(out / "gauss_toy.json", {"q_A1": q1, "q_A2": q2})
    return {"files": ["gauss_toy.json"], "q_A1": q1, "q_A2": q2}


def _parse_target(args, mdp) -> TargetPolicySpec:
    if args.target_file:
        return TargetPolicySpec.from_doc(json.loads(Path(args.target_file).read_text()))
    if not (args.state and args.target):
        raise UsageError("need --state with --target, or --target-file")
    return TargetPolicySpec.parse(args.state, args.target)


def cmd_extend(args, out: Path) -> dict:
    mdp = _load_mdp(args)
    target = _parse_target(args, mdp)
    extended, params = build_extension(mdp, target, args.w1, args.w2_min, args.margin, args.tol)
    report = verify_extension(mdp, extended, target, args.tol, params)
    dump_mdp(extended, out / "extended.json")
    _write_json(out / "target.json", target.to_doc())
    _write_json(out / "report.json", report.to_doc())
    if not report.passed(args.kl_tol, args.plain_tol):
        raise CheckFailed("certificate_failed", "extension does not certify", report.to_doc())
    return {"files": ["extended.json", "target.json", "report.json"],
            "kl_at_target": report.kl_at_target}


def cmd_verify(args, out: Path) -> dict:
    original = read_mdp(args.original)
    extended = read_mdp(args.extended)
    target = TargetPolicySpec.from_doc(json.loads(Path(args.target).read_text()))
    report = verify_extension(original, extended, target, args.tol)
    _write_json(out / "report.json", report.to_doc())
    if not report.passed(args.kl_tol, args.plain_tol):
        raise CheckFailed("certificate_failed", "extension does not certify", report.to_doc())
    return {"files": ["report.json"], "kl_at_target": report.kl_at_target}


def cmd_worst_case(args, out: Path) -> dict:
    mdp = _load_mdp(args) if args.mdp else chain_mdp(args.length, seed=args.chain_seed)
    extended, report = worst_case_transform(mdp, args.eta, tol=args.tol)
    dump_mdp(mdp, out / "original.json")
    dump_mdp(extended, out / "extended.json")
    _write_json(out / "report.json", report.to_doc())
    return {"files": ["original.json", "extended.json", "report.json"],
            "j_plus": report.j_plus, "j_minus": report.j_minus, "j_maxent": report.j_maxent}


def _config(args, seed: int) -> LearnerConfig:
    return LearnerConfig(alpha=args.alpha if args.alpha is not None else 1.0, lr=args.lr,
                         lr_schedule=args.lr_schedule, episodes=args.episodes,
                         max_steps=args.max_steps, epsilon_gate=args.epsilon_gate,
                         behavior=args.behavior, epsilon_explore=args.epsilon_explore,
                         seed=seed, eval_every=args.eval_every, q_init=args.q_init)


def _seeds(args) -> list[int]:
    if args.seeds:
        return [int(s) for s in args.seeds.split(",") if s.strip()]
    return [args.seed]


def cmd_train(args, out: Path) -> dict:
    mdp = _env_mdp(args)
    env = MdpEnv(mdp)
    seeds = _seeds(args)
    if not seeds:
        raise UsageError("no seeds given")
    dump_mdp(mdp, out / "mdp.json")
    files = ["mdp.json"]
    summary = []
    for seed in seeds:
        result = q_learning(env, _config(args, seed), args.mode)
        log_name = f"train_{args.mode}_seed{seed}.csv"
        (out / log_name).write_text(rows_to_csv(result.log_rows(), LOG_FIELDS))
        tab_name = f"tables_{args.mode}_seed{seed}.json"
        _write_json(out / tab_name, result.tables.to_doc(env))
        files += [log_name, tab_name]
        summary.append({"seed": seed, "final_eval_return": result.log[-1].eval_return})
    rows = [{"seed": s["seed"], "mode": args.mode, "final_eval_return": s["final_eval_return"]}
            for s in sorted(summary, key=lambda s: s["seed"])]
    (out / f"summary_{args.mode}.csv").write_text(
        rows_to_csv(rows, ["seed", "mode", "final_eval_return"]))
    files.append(f"summary_{args.mode}.csv")
    return {"files": files, "runs": summary}


def cmd_eval(args, out: Path) -> dict:
    mdp = _env_mdp(args)
    env = MdpEnv(mdp)
    tables = DualQTables.from_doc(json.loads(Path(args.tables).read_text()), env)
    if args.epsilon_gate is not None:
        tables.epsilon_gate = args.epsilon_gate
    mean, stderr = evaluate_rollouts(env, tables, args.selection, args.n_episodes, args.seed,
                                     args.max_steps)
    doc = {"selection": args.selection, "mean_return": mean, "stderr": stderr,
           "n_episodes": args.n_episodes}
    _write_json(out / "eval.json", doc)
    return {"files": ["eval.json"], **doc}


def cmd_landscape(args, out: Path) -> dict:
    mdp = _env_mdp(args)
    states = args.state or None
    try:
        text = _landscape(mdp, mdp.alpha, args.tol, states)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    (out / "landscape.csv").write_text(text)
    return {"files": ["landscape.csv"]}


def cmd_validate(args, out: Path) -> dict:
    doc = json.loads(Path(args.mdp).read_text())
    from .mdp import load_mdp

    try:
        load_mdp(doc)
    except MdpError as exc:
        violations = [str(v) for v in getattr(exc, "violations", [])] or [str(exc)]
        _write_json(out / "validation.json", {"valid": False, "violations": violations})
        raise CheckFailed("invalid_mdp", str(exc), {"violations": violations})
    _write_json(out / "validation.json", {"valid": True, "violations": []})
    return {"files": ["validation.json"], "valid": True}


COMMANDS = {
    "toy": cmd_toy,
    "gauss-toy": cmd_gauss_toy,
    "extend": cmd_extend,
    "verify": cmd_verify,
    "worst-case": cmd_worst_case,
    "train": cmd_train,
    "eval": cmd_eval,
    "landscape": cmd_landscape,
    "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output directory (default $ENTROPY_TRAP_OUT or .)")
    common.add_argument("--alpha", type=float, default=None, help="entropy temperature override")
    common.add_argument("--gamma-override", type=float, default=None)
    common.add_argument("--tol", type=float, default=1e-12)

    env_opts = argparse.ArgumentParser(add_help=False)
    env_opts.add_argument("--mdp", help="MDP document (JSON)")
    env_opts.add_argument("--env", choices=["toy", "chain", "trap-chain", "obstacle2d"], default="toy")
    env_opts.add_argument("--length", type=int, default=5)
    env_opts.add_argument("--chain-seed", type=int, default=0)
    env_opts.add_argument("--eta", type=float, default=0.99)
    env_opts.add_argument("--grid", type=int, default=20)

    learn = argparse.ArgumentParser(add_help=False)
    learn.add_argument("--mode", choices=["soft", "plain", "adaent"], default="soft")
    learn.add_argument("--episodes", type=int, default=1000)
    learn.add_argument("--lr", type=float, default=0.2)
    learn.add_argument("--lr-schedule", choices=["constant", "visits"], default="constant")
    learn.add_argument("--max-steps", type=int, default=100)
    learn.add_argument("--behavior", choices=["boltzmann", "epsilon_greedy"], default="boltzmann")
    learn.add_argument("--epsilon-explore", type=float, default=0.05)
    learn.add_argument("--eval-every", type=int, default=100)
    learn.add_argument("--q-init", type=float, default=0.0)
    learn.add_argument("--seed", type=int, default=0)
    learn.add_argument("--seeds", help="comma-separated seeds")

    p = argparse.ArgumentParser(prog="entropy-trap", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("toy", parents=[common], help="solve the two-branch toy")
    s.add_argument("--scaled", action="store_true", help="scale terminal rewards by --alpha")

    s = sub.add_parser("gauss-toy", parents=[common], help="squashed-Gaussian toy estimate")
    s.add_argument("--samples", type=int, default=1_000_000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--mu-g", type=float, default=PAPER_GAUSS_G.mu)
    s.add_argument("--sigma-g", type=float, default=PAPER_GAUSS_G.sigma)
    s.add_argument("--mu-b", type=float, default=PAPER_GAUSS_B.mu)
    s.add_argument("--sigma-b", type=float, default=PAPER_GAUSS_B.sigma)

    cert = argparse.ArgumentParser(add_help=False)
    cert.add_argument("--kl-tol", type=float, default=1e-6)
    cert.add_argument("--plain-tol", type=float, default=1e-8)

    s = sub.add_parser("extend", parents=[common, cert], help="build a bifurcation extension")
    s.add_argument("--mdp", required=True)
    s.add_argument("--state")
    s.add_argument("--target", help='atom:mass list, e.g. "A_1:0.01,A_2:0.99"')
    s.add_argument("--target-file")
    s.add_argument("--w1", type=float, default=1.0)
    s.add_argument("--w2-min", type=float, default=1.0)
    s.add_argument("--margin", type=float, default=0.1)

    s = sub.add_parser("verify", parents=[common, cert], help="certify an extension")
    s.add_argument("--original", required=True)
    s.add_argument("--extended", required=True)
    s.add_argument("--target", required=True, help="target document (JSON)")

    s = sub.add_parser("worst-case", parents=[common], help="extend every state toward its worst atom")
    s.add_argument("--mdp")
    s.add_argument("--length", type=int, default=3)
    s.add_argument("--chain-seed", type=int, default=0)
    s.add_argument("--eta", type=float, default=0.99)

    sub.add_parser("train", parents=[common, env_opts, learn], help="tabular learners")

    s = sub.add_parser("eval", parents=[common, env_opts], help="greedy rollouts of saved tables")
    s.add_argument("--tables", required=True)
    s.add_argument("--selection", choices=["greedy_soft", "greedy_plain", "gated"],
                   default="greedy_plain")
    s.add_argument("--n-episodes", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-steps", type=int, default=100)
    s.add_argument("--epsilon-gate", type=float, default=None)

    s = sub.add_parser("landscape", parents=[common, env_opts], help="export the Q landscape")
    s.add_argument("--state", action="append", help="restrict to state (repeatable)")

    s = sub.add_parser("validate", parents=[common], help="validate an MDP document")
    s.add_argument("--mdp", required=True)

    # train's gate flag lives with the learner options
    for name in ("train",):
        sub.choices[name].add_argument("--epsilon-gate", type=float, default=0.95)
    return p


def run_command(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) if exc.code in (0, None) else 2
    started = time.time()
    out = _out_dir(args)
    config = {k: v for k, v in vars(args).items()}
    try:
        result = COMMANDS[args.command](args, out)
        status, code = 0, "ok"
    except CheckFailed as exc:
        _error(exc.code, str(exc), exc.detail)
        result, status, code = {"error": str(exc)}, 2, exc.code
    except (UsageError, MdpError, ExtensionError, FileNotFoundError, json.JSONDecodeError) as exc:
        kind = {UsageError: "usage", FileNotFoundError: "unreadable_input"}.get(type(exc))
        if kind is None:
            kind = "infeasible_extension" if isinstance(exc, ExtensionError) else "invalid_input"
        _error(kind, str(exc))
        result, status, code = {"error": str(exc)}, 2, kind
    except Exception as exc:  # noqa: BLE001
        _error("internal", f"{type(exc).__name__}: {exc}")
        result, status, code = {"error": str(exc)}, 1, "internal"
    manifest = {
        "command": args.command,
        "argv": list(argv) if argv is not None else sys.argv[1:],
        "config": config,
        "version": __version__,
        "exit_code": status,
        "status": code,
        "wall_time_s": time.time() - started,
        "result": result,
    }
    _write_json(out / "manifest.json", manifest)
    return status


def _error(code: str, message: str, detail: dict | None = None) -> None:
    doc = {"code": code, "message": message}
    if detail:
        doc["detail"] = detail
    print(json.dumps(doc), file=sys.stderr)


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
