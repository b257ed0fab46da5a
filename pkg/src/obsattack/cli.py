"""Command-line entry point: ``obsattack <command> [options]``.

Exit codes: 0 success, 1 a verified property failed, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

from .analysis import (bound_report_from_tables, check_inclusion_chain, enumerate_policy_set,
                       prop1_facts, prop2_facts)
from .attacks import SPACE_TAGS, induced_tabular_policy
from .envs import FIG4_VARIANTS, RIGHT, discrete_budget_from_radius, parse_norm
from .errors import ObsAttackError
from .harness import (ENVIRONMENTS, OUTPUT_ROOT_ENV, AttackSpec, DeceptiveSpec, ExperimentConfig, VictimSpec,
                      build_deceptive, build_env, build_victim, fmt, load_config, make_attacker,
                      make_budget, run_sweep)
from .mdp import evaluate_policy
from .policy import load_policy, save_policy, tabulate

log = logging.getLogger("obsattack")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
PROP_EPSILON = 0.25


class UsageError(Exception):
    pass


def _env_arg(p: argparse.ArgumentParser) -> None:
    p.add_argument("--env", default="fig3",
                   help=f"named gridworld ({', '.join(ENVIRONMENTS)}) or a layout JSON file")
    p.add_argument("--embedding", default="coordinate", help="observation embedding kind")


def _json_number(v):
    # JSON has no NaN or infinity
    if isinstance(v, float):
        return float(fmt(v)) if math.isfinite(v) else None
    return v


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# --- commands ----------------------------------------------------------------------

def cmd_train_victim(args) -> int:
    mdp, _, emb = build_env(args.env, args.embedding)
    spec = VictimSpec(kind=args.kind, hidden=tuple(args.hidden), steps=args.steps, seed=args.seed)
    victim = build_victim(spec, mdp, emb)
    ret = evaluate_policy(mdp, tabulate(victim, emb)).return_value
    save_policy(victim, args.out)
    print(f"victim saved to {args.out}; exact return {fmt(ret)}")
    return EXIT_OK


def cmd_train_deceptive(args) -> int:
    mdp, _, emb = build_env(args.env, args.embedding)
    spec = DeceptiveSpec(algorithm=args.algorithm, steps=args.steps, seed=args.seed,
                         ensemble=args.ensemble, temperature=args.temperature)
    dec = build_deceptive(spec, mdp, emb)
    ret = evaluate_policy(mdp, tabulate(dec, emb)).return_value
    save_policy(dec, args.out)
    print(f"deceptive policy saved to {args.out}; exact return {fmt(ret)}")
    return EXIT_OK


def cmd_attack(args) -> int:
    mdp, _, emb = build_env(args.env, args.embedding)
    victim = load_policy(args.victim) if args.victim else build_victim(VictimSpec(), mdp, emb)
    deceptive = load_policy(args.deceptive) if args.deceptive else None
    if deceptive is None and args.tag == "H3_two_stage":
        deceptive = build_deceptive(DeceptiveSpec(), mdp, emb)
    cfg = ExperimentConfig(name="attack", env=args.env, embedding_kind=args.embedding,
                           attacks=(AttackSpec("cli", args.tag, method=args.method,
                                               iterations=args.iterations,
                                               step_scale=args.step_scale,
                                               restarts=args.restarts),),
                           epsilons=(args.epsilon,), norm=args.norm, budget_mode=args.mode,
                           victim=VictimSpec(kind="distilled"))
    budget = make_budget(cfg, emb, args.epsilon)
    victim_q = evaluate_policy(mdp, tabulate(victim, emb)).q_values
    attacker = make_attacker(cfg.attacks[0], budget, emb, deceptive, victim_q, args.seed)
    table = induced_tabular_policy(victim, attacker, emb)
    ret = evaluate_policy(mdp, table).return_value
    out = {"tag": args.tag, "epsilon": args.epsilon, "return": float(fmt(ret))}
    if deceptive is not None:
        rep = bound_report_from_tables(mdp, table, tabulate(deceptive, emb))
        out["bounds"] = {k: _json_number(v) for k, v in rep.to_dict().items()}
    print(json.dumps(out, indent=1, sort_keys=True, allow_nan=False))
    if args.out:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["state", *mdp.action_labels])
        for s, row in enumerate(table):
            w.writerow([mdp.state_labels[s], *(fmt(p) for p in row)])
        Path(args.out).write_text(buf.getvalue())
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    if args.svg:
        cfg = replace(cfg, svg=True)
    res = run_sweep(cfg, args.output, resume=not args.no_resume)
    print(f"{len(res.rows)} rows written to {res.output_dir / 'results.csv'}")
    return EXIT_OK


def reaches_negative_terminal(value: float, gamma: float, tol: float = 1e-9) -> bool:
    """True if ``value`` equals ``-gamma**k`` for some number of steps k."""
    if value >= 0:
        return False
    k = round(math.log(-value) / math.log(gamma))
    return k >= 0 and abs(value + gamma ** k) <= tol


def _verify_fig3(args, out: Path) -> list[tuple[str, bool]]:
    mdp, layout, emb = build_env("fig3", args.embedding)
    victim = build_victim(VictimSpec(kind="optimal"), mdp, emb)
    budget = discrete_budget_from_radius(emb, args.epsilon, parse_norm(args.norm))
    sg = layout.state_index()[layout.landmarks["green"]]
    f = prop1_facts(mdp, emb, victim, budget, sg, RIGHT)
    h2 = enumerate_policy_set(mdp, emb, victim, budget, "H2")
    h3 = enumerate_policy_set(mdp, emb, victim, budget, "H3")
    inc = check_inclusion_chain([f["h1"], h2, h3])
    checks = [
        ("H1 min return > H* return", f["h1_min_return"] > f["h_star_return"] + 1e-9),
        ("every H1 member: pi(right|s_g) < 1", all(p < 1 - 1e-9 for p in f["h1_good_action_probs"])),
        ("H* witness: pi(right|s_g) = 1", abs(f["witness_good_action_prob"] - 1) <= 1e-9),
        ("H1 <= H2 <= H3", inc.holds),
    ]
    _write_json(out / "fig3_certificate.json", {
        "env": "fig3", "epsilon": args.epsilon, "norm": args.norm,
        "green_state": sg, "h1_min_return": f["h1_min_return"],
        "h_star_return": f["h_star_return"],
        "h1_good_action_probs": f["h1_good_action_probs"],
        "witness_good_action_prob": f["witness_good_action_prob"],
        "checks": {name: ok for name, ok in checks},
        "h1": f["h1"].to_dict(), "h_star": f["h_star"].to_dict(),
    })
    return checks


def _verify_fig4(args, out: Path) -> list[tuple[str, bool]]:
    checks, report = [], {"env": "fig4", "epsilon": args.epsilon, "norm": args.norm, "variants": {}}
    for variant in FIG4_VARIANTS:
        mdp, layout, emb = build_env(f"fig4_{variant}", args.embedding)
        victim = build_victim(VictimSpec(kind="optimal"), mdp, emb)
        budget = discrete_budget_from_radius(emb, args.epsilon, parse_norm(args.norm))
        sg = layout.state_index()[layout.landmarks["green"]]
        f = prop2_facts(mdp, emb, victim, budget, sg)
        expected = {"right_down": [1, 2], "up_down": [0, 2], "left_down": [2, 3]}[variant]
        checks += [
            (f"{variant}: H2 options at s_g", f["h2_actions_at_green"] == expected),
            (f"{variant}: every H2 policy has V(s_g) >= 0", f["h2_min_value_at_green"] >= -1e-9),
            (f"{variant}: H* reaches the -1 terminal",
             reaches_negative_terminal(f["h_star_value_at_green"], mdp.gamma)),
        ]
        report["variants"][variant] = {
            "green_state": sg, "h2_actions_at_green": f["h2_actions_at_green"],
            "h2_min_value_at_green": f["h2_min_value_at_green"],
            "h_star_value_at_green": f["h_star_value_at_green"],
            "h2": f["h2"].to_dict(), "h_star": f["h_star"].to_dict(),
        }
    report["checks"] = {name: ok for name, ok in checks}
    _write_json(out / "fig4_certificate.json", report)
    return checks


def cmd_verify_props(args) -> int:
    out = Path(args.out)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    env = args.env
    if env not in ("fig3", "fig4"):
        raise UsageError(f"verify-props supports --env fig3 or fig4, not {env!r}")
    checks = _verify_fig3(args, out) if env == "fig3" else _verify_fig4(args, out)
    for name, ok in checks:
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    print(f"certificate written to {out / f'{env}_certificate.json'}")
    return EXIT_OK if all(ok for _, ok in checks) else EXIT_FAIL


def cmd_check_bounds(args) -> int:
    cfg = load_config(args.config)
    res = run_sweep(cfg, args.output, resume=False)
    failures = []
    fields = ("attack", "epsilon", "seed", "beta0", "beta1", "C", "alpha_hat", "lemma1_rhs",
              "attacked_return", "lemma1_holds", "lemma2_lhs", "lemma2_rhs", "lemma2_holds",
              "beta1_infinite", "beta1_clamped")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for (name, eps, seed), rep in sorted(res.reports.items()):
        d = rep.to_dict()
        w.writerow([name, eps, seed, *(fmt(d[k]) for k in fields[3:])])
        if not rep.lemma1_holds and not rep.beta1_infinite:
            failures.append(f"lemma 1 violated: {name} eps={eps} seed={seed}")
        if not rep.lemma2_holds:
            failures.append(f"TV/KL inequality violated: {name} eps={eps} seed={seed}")
    for t in res.thm4_rows:
        if t["applicable"] == "true" and t["conclusion"] != "true":
            failures.append(f"theorem 4 counterexample: {t['attack']} vs {t['baseline']} "
                            f"eps={t['epsilon']}")
    (res.output_dir / "bounds.csv").write_text(buf.getvalue())
    applicable = sum(t["applicable"] == "true" for t in res.thm4_rows)
    print(f"{len(res.reports)} runs checked; theorem-4 premise met on {applicable} of "
          f"{len(res.thm4_rows)} pairs")
    for f in failures:
        print("FAIL ", f)
    if not failures:
        print("PASS  all bound checks")
    return EXIT_FAIL if failures else EXIT_OK


def cmd_render_env(args) -> int:
    _, layout, _ = build_env(args.env, args.embedding)
    print(layout.render())
    return EXIT_OK


# --- parser ------------------------------------------------------------------------

def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="obsattack", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("train-victim", help="distil a feedforward victim from the optimal policy")
    _env_arg(p)
    p.add_argument("--kind", choices=("distilled", "optimal"), default="distilled")
    p.add_argument("--hidden", type=_int_list, default=[32, 32])
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path (JSON)")
    p.set_defaults(func=cmd_train_victim)

    p = sub.add_parser("train-deceptive", help="train a reward-minimising policy")
    _env_arg(p)
    p.add_argument("--algorithm", default="q_learning",
                   choices=("q_learning", "actor_critic", "policy_gradient"))
    p.add_argument("--steps", type=int, default=20_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ensemble", type=int, default=3)
    p.add_argument("--temperature", type=float, default=0.02)
    p.add_argument("--out", required=True, help="checkpoint path (JSON)")
    p.set_defaults(func=cmd_train_deceptive)

    p = sub.add_parser("attack", help="attack one victim and evaluate the result exactly")
    _env_arg(p)
    p.add_argument("--victim", help="victim checkpoint; default distils one")
    p.add_argument("--deceptive", help="deceptive checkpoint (enables the bound report)")
    p.add_argument("--tag", choices=SPACE_TAGS, default="H3_two_stage")
    p.add_argument("--epsilon", type=float, default=0.3)
    p.add_argument("--norm", default="linf")
    p.add_argument("--mode", choices=("continuous_ball", "discrete_set"), default="continuous_ball")
    p.add_argument("--method", choices=("fgsm", "pgd"), default="pgd")
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--step-scale", type=float, default=0.25)
    p.add_argument("--restarts", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the attacked policy table as CSV")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("sweep", help="run an epsilon sweep from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--output", help="output directory (overrides the config)")
    p.add_argument("--no-resume", action="store_true", help="discard rows already on disk")
    p.add_argument("--svg", action="store_true", help="also write returns.svg")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify-props", help="exhaustive certificates for the shipped gridworlds")
    p.add_argument("--env", default="fig3", choices=("fig3", "fig4"))
    p.add_argument("--embedding", default="coordinate")
    p.add_argument("--epsilon", type=float, default=PROP_EPSILON)
    p.add_argument("--norm", default="linf")
    p.add_argument("--out", default="certificates", help="directory for the certificate JSON")
    p.set_defaults(func=cmd_verify_props)

    p = sub.add_parser("check-bounds", help="run a sweep and check every bound exactly")
    p.add_argument("--config", required=True)
    p.add_argument("--output", help="output directory (overrides the config)")
    p.set_defaults(func=cmd_check_bounds)

    p = sub.add_parser("render-env", help="print a gridworld as ASCII")
    _env_arg(p)
    p.set_defaults(func=cmd_render_env)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (FileNotFoundError, UsageError) as exc:
        print(f"obsattack {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ObsAttackError as exc:
        print(f"obsattack {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
