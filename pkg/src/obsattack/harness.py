"""Experiment configs, epsilon sweeps and persistence.

A sweep materialises every attacked policy as a table and evaluates it exactly,
so results are deterministic given the config. Output layout per experiment::

    <output_dir>/config.json     snapshot of the config actually run
    <output_dir>/results.csv     one row per (attack, epsilon, seed)
    <output_dir>/thm4.csv        pairwise applicability checks
    <output_dir>/manifest.json   seeds, versions, config digest
    <output_dir>/returns.svg     optional chart of return against epsilon
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import platform
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .analysis import BoundReport, bound_report_from_tables, thm4_thresholds
from .attacks import (MAD_VARIANTS, SPACE_TAGS, Attacker, OptimizerConfig, StrategicTimer,
                      induced_tabular_policy)
from .envs import (EMBEDDING_KINDS, GridworldLayout, ObservationEmbedding, PerturbationBudget,
                   build_fig3_gridworld, build_fig4_gridworld, discrete_budget_from_radius,
                   gridworld_mdp, make_embedding, parse_norm)
from .errors import ConfigurationError, ValidationError
from .mdp import MdpSpec, evaluate_policy, sample_trajectories, solve_optimal
from .policy import FeedforwardPolicy, Policy, TabularPolicy, load_policy, tabulate
from .training import TrainConfig, distill_feedforward, train_deceptive

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "OBSATTACK_OUTPUT_ROOT"
RESULT_FIELDS = ("attack", "epsilon", "seed", "return", "beta0", "beta1", "C", "alpha_hat",
                 "lemma1_rhs", "lemma1_holds")
THM4_FIELDS = ("attack", "baseline", "epsilon", "seed", "beta1", "threshold",
               "threshold_derived", "applicable", "return", "baseline_return", "conclusion")
CONTROL = "identity"
VICTIM_KINDS = ("distilled", "optimal", "checkpoint")

ENVIRONMENTS = {
    "fig3": build_fig3_gridworld,
    "fig4": lambda kind="coordinate": build_fig4_gridworld("right_down", kind),
    "fig4_right_down": lambda kind="coordinate": build_fig4_gridworld("right_down", kind),
    "fig4_up_down": lambda kind="coordinate": build_fig4_gridworld("up_down", kind),
    "fig4_left_down": lambda kind="coordinate": build_fig4_gridworld("left_down", kind),
}


def fmt(x) -> str:
    """Stable text for CSV cells."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if x is None:
        return ""
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if math.isnan(x):
        return "nan"
    # twelve significant digits survive BLAS-level reordering noise
    return format(round(x, 12) + 0.0, ".12g")


# --- config ------------------------------------------------------------------------

@dataclass(frozen=True)
class VictimSpec:
    kind: str = "distilled"
    checkpoint: str | None = None
    hidden: tuple[int, ...] = (32, 32)
    steps: int = 3000
    learning_rate: float = 0.01
    seed: int = 0
    temperature: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.kind not in VICTIM_KINDS:
            raise ConfigurationError(f"unknown victim kind {self.kind!r}")
        if self.kind == "checkpoint" and not self.checkpoint:
            raise ConfigurationError("victim kind 'checkpoint' needs a checkpoint path")


@dataclass(frozen=True)
class DeceptiveSpec:
    algorithm: str = "q_learning"
    steps: int = 20_000
    learning_rate: float = 0.5
    seed: int = 0
    ensemble: int = 3
    # softmax over the learned scores; keeps full support so beta1 stays finite
    temperature: float = 0.02
    checkpoint: str | None = None

    def __post_init__(self):
        if self.ensemble < 1:
            raise ConfigurationError("deceptive ensemble must be >= 1")
        if not self.temperature > 0:
            raise ConfigurationError("deceptive temperature must be > 0")


@dataclass(frozen=True)
class AttackSpec:
    name: str
    tag: str
    mad_variant: str = "deterministic"
    method: str = "pgd"
    iterations: int = 10
    # optimiser step size as a fraction of epsilon
    step_scale: float = 0.25
    entropy_weight: float = 0.0
    timing_threshold: float = 0.5
    random_start: bool = False
    restarts: int = 0
    epsilons: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.tag not in SPACE_TAGS:
            raise ConfigurationError(f"attack {self.name!r}: unknown space tag {self.tag!r}")
        if self.mad_variant not in MAD_VARIANTS:
            raise ConfigurationError(f"attack {self.name!r}: unknown MAD variant {self.mad_variant!r}")
        if self.method not in ("fgsm", "pgd"):
            raise ConfigurationError(f"attack {self.name!r}: unknown optimizer {self.method!r}")
        if not self.step_scale > 0 or self.iterations < 1:
            raise ConfigurationError(f"attack {self.name!r}: step_scale and iterations must be positive")
        if self.epsilons is not None:
            object.__setattr__(self, "epsilons", _epsilon_grid(self.epsilons, self.name))

    def optimizer(self, epsilon: float) -> OptimizerConfig:
        step = self.step_scale * epsilon if epsilon > 0 else self.step_scale
        return OptimizerConfig(self.method, self.iterations, step, self.entropy_weight,
                               True, self.random_start, self.restarts)


def _epsilon_grid(values, owner: str = "config") -> tuple[float, ...]:
    eps = tuple(float(e) for e in values)
    if not eps:
        raise ConfigurationError(f"{owner}: epsilon grid is empty")
    if any(e < 0 or not math.isfinite(e) for e in eps):
        raise ConfigurationError(f"{owner}: epsilons must be finite and >= 0")
    if any(b <= a for a, b in zip(eps, eps[1:])):
        raise ConfigurationError(f"{owner}: epsilon grid must be strictly increasing")
    return eps


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    env: str
    attacks: tuple[AttackSpec, ...]
    epsilons: tuple[float, ...]
    seeds: tuple[int, ...] = (0,)
    embedding_kind: str = "coordinate"
    norm: str = "linf"
    budget_mode: str = "continuous_ball"
    victim: VictimSpec = field(default_factory=VictimSpec)
    deceptive: DeceptiveSpec = field(default_factory=DeceptiveSpec)
    exact: bool = True
    episodes: int = 200
    bounds: bool = True
    output_dir: str = "runs"
    svg: bool = False

    def __post_init__(self):
        object.__setattr__(self, "attacks", tuple(self.attacks))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "epsilons", _epsilon_grid(self.epsilons))
        if not self.attacks:
            raise ConfigurationError("config needs at least one attack")
        if not self.seeds:
            raise ConfigurationError("config needs at least one seed")
        names = [a.name for a in self.attacks]
        if len(set(names)) != len(names) or CONTROL in names:
            raise ConfigurationError(f"attack names must be unique and not {CONTROL!r}")
        if self.embedding_kind not in EMBEDDING_KINDS:
            raise ConfigurationError(f"unknown embedding kind {self.embedding_kind!r}")
        if self.budget_mode not in ("continuous_ball", "discrete_set"):
            raise ConfigurationError(f"unknown budget mode {self.budget_mode!r}")
        try:
            parse_norm(self.norm)
        except ValidationError as exc:
            raise ConfigurationError(str(exc)) from None
        if not self.exact and self.episodes < 1:
            raise ConfigurationError("episodes must be >= 1 when exact evaluation is off")
        if self.env not in ENVIRONMENTS and not self.env.endswith(".json"):
            raise ConfigurationError(f"unknown environment {self.env!r}")
        # gradient attacks need a differentiable victim in continuous mode
        if self.budget_mode == "continuous_ball" and self.victim.kind == "optimal":
            grad_tags = {"H1_full_untargeted", "H2_strategic_untargeted",
                         "H3_critic_targeted", "H3_two_stage"}
            bad = [a.name for a in self.attacks if a.tag in grad_tags]
            if bad:
                raise ConfigurationError(
                    f"attacks {bad} need input gradients; a tabular victim only supports "
                    "the discrete budget mode")

    def epsilons_for(self, attack: AttackSpec) -> tuple[float, ...]:
        return attack.epsilons if attack.epsilons is not None else self.epsilons

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["attacks"] = [{k: v for k, v in asdict(a).items() if v is not None} for a in self.attacks]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        d = dict(d)
        try:
            d["attacks"] = tuple(AttackSpec(**a) for a in d.get("attacks", []))
            d["victim"] = VictimSpec(**d.get("victim", {}))
            d["deceptive"] = DeceptiveSpec(**d.get("deceptive", {}))
            return cls(**d)
        except TypeError as exc:
            raise ConfigurationError(f"bad config field: {exc}") from None

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def load_config(path) -> ExperimentConfig:
    """Read a JSON experiment config; a missing file raises FileNotFoundError."""
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{p}: not valid JSON ({exc})") from None
    return ExperimentConfig.from_dict(data)


def resolve_output_dir(config: ExperimentConfig, override=None) -> Path:
    out = Path(override) if override is not None else Path(config.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


# --- building blocks ---------------------------------------------------------------

def build_env(name: str, embedding_kind: str = "coordinate"):
    """(mdp, layout, embedding) from a named builder or a layout JSON file.

    A layout file may carry a top-level ``gamma``.
    """
    if name in ENVIRONMENTS:
        return ENVIRONMENTS[name](embedding_kind)
    p = Path(name)
    if not p.is_file():
        raise FileNotFoundError(f"layout file not found: {p}")
    data = json.loads(p.read_text())
    layout = GridworldLayout.from_dict(data)
    mdp = gridworld_mdp(layout, data.get("gamma", 0.9))
    return mdp, layout, make_embedding(layout, embedding_kind)


def build_victim(spec: VictimSpec, mdp: MdpSpec, embedding: ObservationEmbedding) -> Policy:
    if spec.kind == "checkpoint":
        return load_policy(spec.checkpoint)
    best = solve_optimal(mdp)
    if spec.kind == "optimal":
        return TabularPolicy.from_probs(best.policy, embedding, metadata={"optimal": True})
    return distill_feedforward(best.policy, embedding, spec.hidden, spec.steps,
                               spec.learning_rate, spec.seed, spec.temperature)


def build_deceptive(spec: DeceptiveSpec, mdp: MdpSpec, embedding: ObservationEmbedding) -> TabularPolicy:
    if spec.checkpoint:
        pol = load_policy(spec.checkpoint)
        if not isinstance(pol, TabularPolicy):
            raise ConfigurationError("deceptive checkpoint must hold a tabular policy")
        return pol
    cfg = TrainConfig(algorithm=spec.algorithm, steps=spec.steps, learning_rate=spec.learning_rate,
                      seed=spec.seed, greedy=False)
    return train_deceptive(mdp, embedding, cfg, spec.ensemble).with_temperature(spec.temperature)


def make_budget(config: ExperimentConfig, embedding: ObservationEmbedding,
                epsilon: float) -> PerturbationBudget:
    order = parse_norm(config.norm)
    if config.budget_mode == "discrete_set":
        return discrete_budget_from_radius(embedding, epsilon, order)
    return PerturbationBudget(epsilon, order)


def make_attacker(spec: AttackSpec, budget: PerturbationBudget, embedding: ObservationEmbedding,
                  deceptive: Policy | None, victim_q: np.ndarray, seed: int) -> Attacker:
    attacker = Attacker(
        space_tag=spec.tag, budget=budget, optimizer=spec.optimizer(budget.epsilon),
        target_policy=deceptive, timing_rule=StrategicTimer("preference_gap", spec.timing_threshold),
        aux_q=victim_q, embedding=embedding, mad_variant=spec.mad_variant, seed=seed)
    attacker.check()
    return attacker


# --- sweep -------------------------------------------------------------------------

@dataclass
class SweepResult:
    config: ExperimentConfig
    output_dir: Path
    rows: list[dict[str, str]]
    thm4_rows: list[dict[str, str]]
    tables: dict[tuple[str, str, int], np.ndarray]
    reports: dict[tuple[str, str, int], BoundReport]
    clean_return: float
    optimal_return: float
    deceptive_return: float
    worst_return: float

    def returns(self, attack: str, epsilon: float, seed: int = 0) -> float:
        key = (attack, fmt(epsilon), str(seed))
        for r in self.rows:
            if (r["attack"], r["epsilon"], r["seed"]) == key:
                return float(r["return"])
        raise KeyError(key)


def _read_rows(path: Path, fields: Sequence[str]) -> list[dict[str, str]]:
    if not path.is_file():
        return []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != tuple(fields):
            raise ValidationError(f"{path}: unexpected CSV header {reader.fieldnames}")
        return list(reader)


def _write_rows(path: Path, fields: Sequence[str], rows: list[dict[str, str]]) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(fields), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(buf.getvalue())
    tmp.replace(path)


def _append_row(path: Path, fields: Sequence[str], row: dict[str, str]) -> None:
    new = not path.is_file()
    with path.open("a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n")
        if new:
            writer.writeheader()
        writer.writerow(row)


def _result_row(name: str, eps: float, seed: int, ret: float, rep: BoundReport | None):
    row = {"attack": name, "epsilon": fmt(eps), "seed": str(seed), "return": fmt(ret)}
    for k in RESULT_FIELDS[4:]:
        row[k] = fmt(getattr(rep, k)) if rep is not None else ""
    return row


def _thm4_rows(rows: list[dict[str, str]], gamma: float, r_min: float) -> list[dict[str, str]]:
    """Check the Theorem-4 premise for every ordered pair of attacks in a cell."""
    cells: dict[tuple[str, str], list[dict[str, str]]] = {}
    for r in rows:
        cells.setdefault((r["epsilon"], r["seed"]), []).append(r)
    out = []
    for (eps, seed), group in cells.items():
        for r in group:
            if r["C"] == "":
                continue
            beta1, C, a_hat = float(r["beta1"]), float(r["C"]), float(r["alpha_hat"])
            ret = float(r["return"])
            for e in group:
                if e is r:
                    continue
                base = float(e["return"])
                printed, derived = thm4_thresholds(gamma, C, base - r_min, a_hat)
                applicable = math.isfinite(beta1) and beta1 < printed
                out.append({
                    "attack": r["attack"], "baseline": e["attack"], "epsilon": eps, "seed": seed,
                    "beta1": r["beta1"], "threshold": fmt(printed), "threshold_derived": fmt(derived),
                    "applicable": fmt(applicable), "return": r["return"],
                    "baseline_return": e["return"],
                    "conclusion": fmt(ret < base) if applicable else "",
                })
    return out


def _versions() -> dict[str, str]:
    from . import __version__
    return {"python": platform.python_version(), "numpy": np.__version__, "obsattack": __version__}


def run_sweep(config: ExperimentConfig, output_dir=None, resume: bool = True) -> SweepResult:
    """Evaluate every (attack, epsilon, seed) cell, skipping rows already on disk."""
    out = resolve_output_dir(config, output_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    mdp, layout, emb = build_env(config.env, config.embedding_kind)
    victim = build_victim(config.victim, mdp, emb)
    clean = tabulate(victim, emb)
    victim_q = evaluate_policy(mdp, clean).q_values
    need_deceptive = config.bounds or any(a.tag == "H3_two_stage" for a in config.attacks)
    deceptive = build_deceptive(config.deceptive, mdp, emb) if need_deceptive else None
    dec_table = tabulate(deceptive, emb) if deceptive is not None else None
    r_min = solve_optimal(mdp, maximize=False).return_value

    results_path = out / "results.csv"
    existing = _read_rows(results_path, RESULT_FIELDS) if resume else []
    if not resume and results_path.exists():
        results_path.unlink()
    done = {(r["attack"], r["epsilon"], r["seed"]) for r in existing}
    rows = list(existing)

    cells = []
    all_eps = sorted({e for a in config.attacks for e in config.epsilons_for(a)} | set(config.epsilons))
    control = AttackSpec(CONTROL, "identity", epsilons=tuple(all_eps))
    for spec in (control, *config.attacks):
        for eps in config.epsilons_for(spec):
            for seed in config.seeds:
                cells.append((spec, eps, seed))

    # fail on a bad attack/space combination before any expensive cell runs
    for spec in config.attacks:
        make_attacker(spec, make_budget(config, emb, config.epsilons_for(spec)[0]), emb,
                      deceptive, victim_q, config.seeds[0])
    tables, reports = {}, {}
    for spec, eps, seed in cells:
        key = (spec.name, fmt(eps), str(seed))
        if key in done:
            continue
        budget = make_budget(config, emb, eps)
        attacker = make_attacker(spec, budget, emb, deceptive, victim_q, seed)
        table = induced_tabular_policy(victim, attacker, emb)
        tables[key] = table
        rep = bound_report_from_tables(mdp, table, dec_table) if config.bounds else None
        if rep is not None:
            reports[key] = rep
        if config.exact:
            ret = evaluate_policy(mdp, table).return_value
        else:
            batch = sample_trajectories(mdp, table, config.episodes, seed=seed)
            ret = float(np.mean(batch.discounted_returns(mdp.gamma)))
        row = _result_row(spec.name, eps, seed, ret, rep)
        _append_row(results_path, RESULT_FIELDS, row)
        rows.append(row)
        done.add(key)
        log.info("%s eps=%s seed=%d return=%s", spec.name, fmt(eps), seed, row["return"])

    order = {s.name: i for i, s in enumerate((control, *config.attacks))}
    rows.sort(key=lambda r: (order.get(r["attack"], len(order)), float(r["epsilon"]), int(r["seed"])))
    _write_rows(results_path, RESULT_FIELDS, rows)
    thm4 = _thm4_rows(rows, mdp.gamma, r_min)
    _write_rows(out / "thm4.csv", THM4_FIELDS, thm4)
    (out / "config.json").write_text(config.to_json())
    manifest = {
        "name": config.name,
        "config_digest": config.digest(),
        "seeds": list(config.seeds),
        "victim_seed": config.victim.seed,
        "deceptive_seed": config.deceptive.seed,
        "versions": _versions(),
        "num_rows": len(rows),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    if config.svg:
        (out / "returns.svg").write_text(render_svg(rows, config.name))
    # wall time goes to the log only so that output files stay byte-identical
    log.info("sweep %s: %d rows in %.2fs", config.name, len(rows), time.perf_counter() - t0)
    return SweepResult(
        config=config, output_dir=out, rows=rows, thm4_rows=thm4, tables=tables, reports=reports,
        clean_return=evaluate_policy(mdp, clean).return_value,
        optimal_return=solve_optimal(mdp).return_value,
        deceptive_return=(evaluate_policy(mdp, dec_table).return_value
                          if dec_table is not None else math.nan),
        worst_return=r_min,
    )


# --- svg ---------------------------------------------------------------------------

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def render_svg(rows: list[dict[str, str]], title: str = "", width: int = 480,
               height: int = 300) -> str:
    """Minimal line chart of return against epsilon, one line per attack."""
    series: dict[str, list[tuple[float, float]]] = {}
    for r in rows:
        series.setdefault(r["attack"], []).append((float(r["epsilon"]), float(r["return"])))
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0
    pad = 40

    def sx(x):
        return pad + (x - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="{width / 2:.0f}" y="20" text-anchor="middle">{title}</text>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2:.0f}" y="{height - 8}" text-anchor="middle">epsilon</text>',
             f'<text x="4" y="{pad - 8}">{y1:.3g}</text>',
             f'<text x="4" y="{height - pad}">{y0:.3g}</text>']
    for i, (name, pts) in enumerate(series.items()):
        pts = sorted(set(pts))
        colour = PALETTE[i % len(PALETTE)]
        path = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in pts)
        parts.append(f'<polyline fill="none" stroke="{colour}" points="{path}"/>')
        parts.append(f'<text x="{width - pad + 4}" y="{pad + 14 * i}" fill="{colour}" '
                     f'font-size="10">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


__all__ = [
    "AttackSpec", "DeceptiveSpec", "ExperimentConfig", "SweepResult", "VictimSpec",
    "build_deceptive", "build_env", "build_victim", "load_config", "make_attacker",
    "make_budget", "render_svg", "resolve_output_dir", "run_sweep",
]
