"""Experiment orchestration behind the CLI verbs: pretrain, run, compare, analyze.

Run directory layout::

    config.snapshot   the exact config used
    rounds.csv        one row per round
    records.json      full round records (sampled clients, chi diagnostics)
    summary.json      final/best accuracies, threshold round, data hashes
    checkpoints/      FBAF checkpoints (initial, periodic, final)
    retained/         per-round models when retention is enabled
    analysis/         reports written by ``analyze``
"""

from __future__ import annotations

import json
import logging
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import analysis, checkpoint
from . import config as config_io
from .analysis import AnalysisPrecondition, ObservedRound
from .config import ExperimentConfig
from .data import Dataset, concat, gen_gaussian_mixture
from .federation import (
    RoundRecord,
    RunResult,
    Setup,
    build_schema,
    build_setup,
    read_rounds_csv,
    rounds_csv,
    run_experiment,
)
from .model import ConfigError, ParamVector, evaluate, init_params, sgd_epoch
from .rng import stream

log = logging.getLogger(__name__)

ALL_CHECKS = ("prop1", "prop2", "dist", "noise", "extraction", "chi", "mac")
NOISE_RATES = (0.0, 0.25, 0.5, 0.75, 1.0, 1.27, 1.5, 2.0)


# -- pretraining ---------------------------------------------------------------


def pretrain_datasets(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Train/test splits of the shifted distribution the foundation learns."""
    d, p = config.data, config.pretrain
    if d.source != "gaussian":
        raise ConfigError("pretraining needs a gaussian data source")
    common = dict(
        means_seed=d.means_seed, separation=d.separation, offset=d.offset,
        mean_shift=p.mean_shift, shift_seed=p.shift_seed,
    )
    train = gen_gaussian_mixture(d.num_classes, d.dim, p.n_per_class, d.spread, p.seed, **common)
    test = gen_gaussian_mixture(
        d.num_classes, d.dim, p.test_n_per_class, d.spread, p.seed + 1, **common
    )
    return train, test


def pretrain(config: ExperimentConfig) -> tuple[ParamVector, float]:
    p = config.pretrain
    train, test = pretrain_datasets(config)
    schema = build_schema(config, train.dim, train.num_classes)
    w = init_params(schema, stream(p.seed, "pretrain-init"))
    rng = stream(p.seed, "pretrain-sgd")
    for epoch in range(p.epochs):
        try:
            w = sgd_epoch(w, train, p.lr, p.batch_size, rng)
        except FloatingPointError:
            raise FloatingPointError(f"pretraining diverged in epoch {epoch}") from None
    return w, evaluate(w, test)


def cmd_pretrain(config: ExperimentConfig, out: str | Path | None = None) -> dict:
    path = Path(out or config.pretrain.out)
    w, acc = pretrain(config)
    checkpoint.save(w, path)
    log.info("foundation written to %s (pretrain test accuracy %.4f)", path, acc)
    return {"checkpoint": str(path), "test_accuracy": acc, "epochs": config.pretrain.epochs}


# -- single runs ---------------------------------------------------------------


def threshold_round(records: Sequence, threshold: float) -> int | None:
    """Index of the first round whose post-aggregation accuracy meets ``threshold``."""
    for rec in records:
        acc = rec.global_acc if isinstance(rec, RoundRecord) else rec["global_acc"]
        if not math.isnan(acc) and acc >= threshold:
            return rec.t if isinstance(rec, RoundRecord) else rec["t"]
    return None


def _json_default(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    raise TypeError(type(value))


def _dump_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(obj, indent=2, sort_keys=True, default=_json_default, allow_nan=True)
    path.write_text(text + "\n")


def write_run(
    out: Path, config: ExperimentConfig, result: RunResult, setup: Setup, threshold: float
) -> dict:
    (out / "analysis").mkdir(parents=True, exist_ok=True)
    config_io.save(config, out / "config.snapshot")
    debug = config.run.debug_alpha
    (out / "rounds.csv").write_text(rounds_csv(result.records, debug))
    _dump_json([r.as_dict(debug) for r in result.records], out / "records.json")
    if result.globals_ is not None:
        for t, (agg, glob) in enumerate(zip(result.aggregates, result.globals_)):
            checkpoint.save(agg, out / "retained" / f"round_{t:04d}_aggregate.fbaf")
            checkpoint.save(glob, out / "retained" / f"round_{t:04d}_global.fbaf")
    if result.client_models is not None:
        for rec, models in zip(result.records, result.client_models):
            for k, w in zip(rec.sampled, models):
                checkpoint.save(w, out / "retained" / f"round_{rec.t:04d}_client_{k:03d}.fbaf")
    accs = [r.global_acc for r in result.records if not math.isnan(r.global_acc)]
    summary = {
        "rounds": len(result.records),
        "final_global_acc": accs[-1] if accs else None,
        "best_global_acc": max(accs) if accs else None,
        "final_local_acc_honest": result.records[-1].local_acc_honest if result.records else None,
        "threshold": threshold,
        "threshold_round": threshold_round(result.records, threshold),
        "seed": config.run.seed,
        "data_hash": {"train": setup.train.digest(), "test": setup.test.digest()},
        "malicious_clients": sorted(setup.plan.malicious_ids),
        "partition": setup.partition.summary(setup.plan.malicious_ids),
    }
    _dump_json(summary, out / "summary.json")
    return summary


def load_foundation(config: ExperimentConfig) -> ParamVector | None:
    if config.strategy.foundation == "none":
        return None
    path = config.strategy.foundation_path
    if not path:
        raise ConfigError("strategy.foundation_path is required for fedbaf/weight_init")
    return checkpoint.load(path)


def cmd_run(
    config: ExperimentConfig, out: str | Path | None = None, threshold: float = 0.8
) -> dict:
    """Run ``run.trials`` trials (master seeds seed, seed+1, ...)."""
    config.validate()
    out = Path(out or config.run.out)
    foundation = load_foundation(config)
    trials = max(1, config.run.trials)
    per_trial = []
    for i in range(trials):
        cfg = config.replace(run={"seed": config.run.seed + i, "trials": 1})
        setup = build_setup(cfg)
        target = out if trials == 1 else out / f"trial_{i}"
        result = run_experiment(cfg, foundation, setup, out_dir=target)
        per_trial.append(write_run(target, cfg, result, setup, threshold))
    if trials == 1:
        return per_trial[0]
    finals = [t["final_global_acc"] for t in per_trial]
    summary = {
        "trials": per_trial,
        "best_of_trials": {
            "final_global_acc": max(f for f in finals if f is not None),
            "trial": int(np.argmax([f if f is not None else -1 for f in finals])),
        },
    }
    config_io.save(config, out / "config.snapshot")
    _dump_json(summary, out / "summary.json")
    return summary


# -- comparison ----------------------------------------------------------------


@dataclass
class ArmResult:
    name: str
    final_acc: list[float]
    best_acc: list[float]
    threshold_round: list[int | None]
    honest_local_acc: list[float]
    mac: list[analysis.MacReport] = field(default_factory=list)
    results: list[RunResult] = field(default_factory=list, repr=False)

    @property
    def best_final(self) -> float:
        return max(self.final_acc)

    def row(self) -> dict:
        return {
            "arm": self.name,
            "final_global_acc": self.final_acc,
            "best_of_trials_final_acc": self.best_final,
            "best_global_acc": self.best_acc,
            "threshold_round": [r if r is not None else "not reached" for r in self.threshold_round],
            "honest_local_acc": self.honest_local_acc,
            "mac": [m.as_dict() for m in self.mac],
        }


@dataclass
class ComparisonReport:
    threshold: float
    arms: list[ArmResult]
    hashes: dict

    def as_dict(self) -> dict:
        return {"threshold": self.threshold, "hashes": self.hashes,
                "arms": [a.row() for a in self.arms]}

    def table(self) -> str:
        """One row per arm and trial; rounds are counted from 1, '-' if never reached."""
        head = f"{'arm':<14}{'trial':>6}{'final acc':>11}{'best acc':>10}{'rounds':>8}{'TMAC':>16}"
        lines = [f"threshold {self.threshold:g}", head, "-" * len(head)]
        for arm in self.arms:
            for i, (final, best, hit) in enumerate(zip(arm.final_acc, arm.best_acc, arm.threshold_round)):
                tmac = str(arm.mac[i].tmac) if i < len(arm.mac) else "-"
                rounds = "-" if hit is None else str(hit + 1)
                lines.append(f"{arm.name:<14}{i:>6}{final:>11.4f}{best:>10.4f}{rounds:>8}{tmac:>16}")
            lines.append(f"{arm.name:<14}{'best':>6}{arm.best_final:>11.4f}")
        return "\n".join(lines)


def _shared_sections(configs: Sequence[ExperimentConfig]) -> None:
    first = configs[0]
    for cfg in configs[1:]:
        for section in ("data", "partition", "model", "attack", "training"):
            if getattr(cfg, section) != getattr(first, section):
                raise ConfigError(f"compared arms differ in [{section}]")
        if cfg.run.seed != first.run.seed:
            raise ConfigError("compared arms must share run.seed")


def arm_name(config: ExperimentConfig) -> str:
    st = config.strategy
    return st.foundation if st.base == "fedavg" else f"{st.foundation}+{st.base}"


def run_arm(
    config: ExperimentConfig,
    foundation: ParamVector | None,
    trials: int,
    threshold: float,
    name: str | None = None,
    out: Path | None = None,
    keep_results: bool = False,
) -> ArmResult:
    arm = ArmResult(name or arm_name(config), [], [], [], [])
    for i in range(trials):
        cfg = config.replace(run={"seed": config.run.seed + i, "trials": 1})
        setup = build_setup(cfg)
        result = run_experiment(cfg, foundation, setup)
        if out is not None:
            write_run(out / arm.name / f"trial_{i}", cfg, result, setup, threshold)
        accs = [r.global_acc for r in result.records]
        hit = threshold_round(result.records, threshold)
        arm.final_acc.append(accs[-1] if accs else math.nan)
        arm.best_acc.append(max(accs) if accs else math.nan)
        arm.threshold_round.append(hit)
        arm.honest_local_acc.append(result.records[-1].local_acc_honest if accs else math.nan)
        rounds = (hit + 1) if hit is not None else len(result.records)
        if rounds:
            arm.mac.append(
                analysis.mac_report(
                    setup.schema, setup.partition.sizes, result.sampled_sizes[:rounds],
                    cfg.training.epochs, rounds,
                )
            )
        if keep_results:
            arm.results.append(result)
    return arm


def compare(
    configs: Sequence[ExperimentConfig],
    threshold: float,
    trials: int | None = None,
    foundation: ParamVector | None = None,
    out: str | Path | None = None,
    names: Sequence[str] | None = None,
) -> ComparisonReport:
    if not configs:
        raise ConfigError("nothing to compare")
    _shared_sections(configs)
    trials = trials or max(1, configs[0].run.trials)
    setup = build_setup(configs[0])
    hashes = {"train": setup.train.digest(), "test": setup.test.digest()}
    arms = []
    for i, cfg in enumerate(configs):
        f = foundation if foundation is not None else load_foundation(cfg)
        if cfg.strategy.foundation == "none":
            f = None
        name = names[i] if names else None
        arms.append(run_arm(cfg, f, trials, threshold, name, Path(out) if out else None))
    report = ComparisonReport(threshold, arms, hashes)
    if out is not None:
        _dump_json(report.as_dict(), Path(out) / "comparison.json")
        (Path(out) / "comparison.txt").write_text(report.table() + "\n")
    return report


# -- offline analysis -----------------------------------------------------------


@dataclass
class RunArtifacts:
    root: Path
    config: ExperimentConfig
    rows: list[dict]
    records: list[dict]

    @classmethod
    def open(cls, root: str | Path) -> "RunArtifacts":
        root = Path(root)
        try:
            cfg = config_io.load(root / "config.snapshot")
            rows = read_rounds_csv(root / "rounds.csv")
            records = json.loads((root / "records.json").read_text())
        except (OSError, ConfigError) as exc:
            raise AnalysisPrecondition(f"{root} is not a complete run directory: {exc}") from None
        return cls(root, cfg, rows, records)

    def retained(self, t: int, what: str) -> ParamVector:
        path = self.root / "retained" / f"round_{t:04d}_{what}.fbaf"
        if not path.exists():
            raise AnalysisPrecondition(
                f"missing {path.name}; rerun with run.retain_models = true"
            )
        return checkpoint.load(path)

    def clients(self, t: int, sampled: Sequence[int]) -> list[ParamVector]:
        out = []
        for k in sampled:
            path = self.root / "retained" / f"round_{t:04d}_client_{k:03d}.fbaf"
            if not path.exists():
                raise AnalysisPrecondition(
                    f"missing {path.name}; rerun with run.retain_client_models = true"
                )
            out.append(checkpoint.load(path))
        return out

    def observed(self, t: int) -> ObservedRound:
        return ObservedRound(
            self.rows[t]["tau"], self.retained(t, "global").values,
            self.retained(t, "aggregate").values,
        )


@dataclass
class _Rec:
    t: int
    alpha_tau: float


def _foundation_for(run: RunArtifacts) -> ParamVector:
    f = load_foundation(run.config) if run.config.strategy.foundation != "none" else None
    if f is None:
        raise AnalysisPrecondition("this check needs a run with a foundation model")
    return f


def _optimum(run: RunArtifacts, cache: dict) -> analysis.OptimumProxy:
    if "w_star" not in cache:
        setup = build_setup(run.config)
        pooled = concat([s.train for s in setup.partition.client_shards])
        init = init_params(setup.schema, stream(run.config.run.seed, "optimum-init"))
        cache["w_star"] = analysis.optimum_proxy(init, pooled)
    return cache["w_star"]


def _check_prop1(run, cache, **_):
    w_pre = _foundation_for(run)
    aggregates = [run.retained(row["t"], "aggregate") for row in run.rows]
    star = _optimum(run, cache)
    rows = []
    for row, w_prime in zip(run.rows, aggregates):
        t, tau, at = row["t"], row["tau"], row["alpha_tau"]
        if not tau > 0 or not at > 0:
            continue
        alpha = at / tau
        bound = analysis.prop1_alpha_bound(w_prime, w_pre, star.w_star, tau)
        improved = analysis.prop1_improvement_check(w_prime, w_pre, star.w_star, alpha, tau)
        exact = analysis.prop1_exact_alpha_bound(w_prime, w_pre, star.w_star, tau)
        rows.append({"t": t, "alpha": alpha, "alpha_bound": _finite(bound),
                     "exact_alpha_bound": _finite(exact),
                     "alpha_within_bound": alpha < bound, "improved": improved})
    consistent = all(r["improved"] for r in rows if r["alpha_within_bound"])
    return {"rounds": rows, "optimum": star.provenance, "pass": consistent}


def _finite(x: float):
    return x if math.isfinite(x) else "unconstrained"


def _check_prop2(run, cache, **_):
    clients = [run.clients(r["t"], r["sampled"]) for r in run.records]
    globals_ = [run.retained(r["t"], "global") for r in run.records]
    star = _optimum(run, cache)
    f = load_foundation(run.config) if run.config.strategy.foundation == "fedbaf" else None
    gamma = analysis.norm2(f.values - star.w_star.values) if f is not None else 0.0
    records = [_Rec(r["t"], r["alpha_tau"]) for r in run.records]
    rows = analysis.prop2_bound_check(records, clients, globals_, star.w_star, gamma)
    return {"rounds": [r.as_dict() for r in rows], "optimum": star.provenance,
            "pass": all(r.holds for r in rows)}


def _check_dist(run, cache, **_):
    """Rows are indexed by model: 0 is the initial model, t+1 the model after round t."""
    w_pre = _foundation_for(run)
    init = checkpoint.load(run.root / "checkpoints" / "round_init.fbaf")
    rows = [{"model": 0, "dist": analysis.dist_metric(init, w_pre)}]
    rows += [{"model": r["t"] + 1, "dist": r["dist_found"]} for r in run.rows]
    late = [r["dist"] for r in rows if r["model"] > 20]
    return {"rounds": rows, "min_after_round_20": min(late) if late else None,
            "pass": bool(late) and min(late) > 1.0}


def _check_noise(run, cache, seed: int = 0, noise_seeds: int = 10, **_):
    w_pre = _foundation_for(run)
    _, test = pretrain_datasets(run.config)
    curves = [analysis.noise_robustness(w_pre, NOISE_RATES, test, seed + i)
              for i in range(noise_seeds)]
    mean = [float(np.mean([c[j][1] for c in curves])) for j in range(len(NOISE_RATES))]
    chance = 1.0 / run.config.data.num_classes
    at_127 = mean[NOISE_RATES.index(1.27)]
    monotone = all(b <= a + 0.05 for a, b in zip(mean, mean[1:]))
    return {"curve": list(zip(NOISE_RATES, mean)), "seeds": noise_seeds, "chance": chance,
            "accuracy_at_1.27": at_127, "non_increasing": monotone,
            "pass": at_127 <= chance + 0.15 and monotone}


def _check_extraction(run, cache, pair: RunArtifacts | None = None, rounds=(0, 1), **_):
    if pair is None:
        raise AnalysisPrecondition("extraction needs --pair <run dir> (static vs random alpha)")
    static, random_ = (run, pair) if run.config.strategy.static_alpha else (pair, run)
    if not static.config.strategy.static_alpha or random_.config.strategy.static_alpha:
        raise AnalysisPrecondition("extraction needs one static-alpha and one random-alpha run")
    w_pre = _foundation_for(run)
    t0, t1 = rounds
    err_static, err_random = analysis.extraction_attack(
        (static.observed(t0), static.observed(t1)),
        (random_.observed(t0), random_.observed(t1)),
        w_pre,
    )
    return {"rounds": list(rounds), "error_static": err_static, "error_random": err_random,
            "pass": err_static < 1e-4 and err_random > 0.5}


def _check_chi(run, cache, **_):
    rows = [{"t": r["t"], "chi_norm2": r.get("chi_norm2"), "inner": r.get("chi_inner")}
            for r in run.records]
    values = [r["chi_norm2"] for r in rows if r["chi_norm2"] is not None]
    if not values:
        raise AnalysisPrecondition("no chi diagnostics; rerun with run.chi_diagnostic = true")
    q = max(1, len(values) // 4)
    first, last = float(np.mean(values[:q])), float(np.mean(values[-q:]))
    return {"rounds": rows, "first_quartile_mean": first, "last_quartile_mean": last,
            "positive_inner_fraction": float(np.mean([r["inner"] > 0 for r in rows
                                                      if r["inner"] is not None])),
            "pass": last < first}


def _check_mac(run, cache, threshold: float = 0.8, **_):
    setup = build_setup(run.config)
    hit = threshold_round(run.rows, threshold)
    rounds = (hit + 1) if hit is not None else len(run.rows)
    if not rounds:
        raise AnalysisPrecondition("run has no rounds")
    sizes = setup.partition.sizes
    sampled = [[sizes[k] for k in r["sampled"]] for r in run.records[:rounds]]
    report = analysis.mac_report(setup.schema, sizes, sampled, run.config.training.epochs, rounds)
    return {"threshold": threshold, "reached": hit is not None, **report.as_dict(), "pass": True}


CHECKS = {
    "prop1": _check_prop1, "prop2": _check_prop2, "dist": _check_dist,
    "noise": _check_noise, "extraction": _check_extraction, "chi": _check_chi,
    "mac": _check_mac,
}


def cmd_analyze(
    run_dir: str | Path,
    checks: Sequence[str],
    pair_dir: str | Path | None = None,
    threshold: float = 0.8,
    seed: int = 0,
) -> dict:
    unknown = [c for c in checks if c not in CHECKS]
    if unknown:
        raise ConfigError(f"unknown checks {unknown}; choose from {list(CHECKS)}")
    run = RunArtifacts.open(run_dir)
    pair = RunArtifacts.open(pair_dir) if pair_dir else None
    cache: dict = {}
    report = {}
    for name in checks:
        report[name] = CHECKS[name](run, cache, pair=pair, threshold=threshold, seed=seed)
    out = Path(run_dir) / "analysis"
    _dump_json(report, out / "report.json")
    (out / "summary.txt").write_text(summary_text(report))
    return report


def summary_text(report: dict) -> str:
    if not report:
        return "no checks requested\n"
    lines = []
    for name, body in report.items():
        status = "PASS" if body.get("pass") else "FAIL"
        detail = {k: v for k, v in body.items()
                  if k not in ("rounds", "curve", "pass", "optimum") and not isinstance(v, (list, dict))}
        lines.append(f"{name:<11}{status}  " + ", ".join(f"{k}={_short(v)}" for k, v in detail.items()))
    return "\n".join(lines) + "\n"


def _short(v) -> str:
    return f"{v:.4g}" if isinstance(v, float) else str(v)


def median(values: Sequence[float]) -> float:
    return statistics.median(values)
