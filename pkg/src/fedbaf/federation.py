"""Federated round engine: ClientUpdate, aggregation, optional foundation bias."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .aggregation import (
    AggregationStrategy,
    FedBaFParams,
    aggregate_base,
    compute_tau,
    draw_alpha,
    fedbaf_bias,
    sample_clients,
)
from .analysis import chi_diagnostic, dist_metric
from .config import ExperimentConfig
from .data import (
    AttackPlan,
    Dataset,
    Partition,
    concat,
    corrupt_labels,
    gen_gaussian_mixture,
    load_csv,
    partition,
)
from .model import (
    ClassMask,
    ConfigError,
    ModelSchema,
    ParamVector,
    evaluate,
    full_loss_and_grad,
    init_params,
    linear_schema,
    mlp_schema,
    norm2,
    sgd_epoch,
)
from .rng import stream

log = logging.getLogger(__name__)

ROUND_COLUMNS = [
    "t", "tau", "alpha_tau", "global_acc", "local_acc_honest",
    "local_acc_all", "norm_w", "norm_delta", "dist_found",
]


class RoundAbort(RuntimeError):
    def __init__(self, t: int, cause: Exception):
        super().__init__(f"round {t}: {cause}")
        self.t = t
        self.cause = cause


@dataclass
class ClientState:
    id: int
    train: Dataset
    local_test: Dataset
    mask: ClassMask | None
    malicious: bool = False
    epochs: int = 1
    mu: float = 0.0

    @property
    def n(self) -> int:
        return len(self.train)


@dataclass
class RoundRecord:
    t: int
    sampled: list[int]
    tau: float
    alpha: float
    alpha_tau: float
    global_acc: float
    local_acc_honest: float
    local_acc_all: float
    norm_w: float
    norm_delta: float
    dist_found: float
    chi_norm2: float | None = None
    chi_inner: float | None = None

    def as_dict(self, debug_alpha: bool = False) -> dict:
        d = dict(self.__dict__)
        if not debug_alpha:
            d.pop("alpha")
        return d


@dataclass
class RunResult:
    records: list[RoundRecord]
    initial: ParamVector
    final: ParamVector
    foundation: ParamVector | None = None
    # populated only when retention is enabled
    aggregates: list[ParamVector] | None = None
    globals_: list[ParamVector] | None = None
    client_models: list[list[ParamVector]] | None = None
    sampled_sizes: list[list[int]] = field(default_factory=list)


# -- setup ------------------------------------------------------------------


def build_schema(config: ExperimentConfig, input_dim: int, num_classes: int) -> ModelSchema:
    if config.model.kind == "mlp":
        return mlp_schema(input_dim, config.model.hidden, num_classes)
    return linear_schema(input_dim, num_classes)


def load_datasets(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    d = config.data
    if d.source == "csv":
        return load_csv(d.train_csv, d.num_classes), load_csv(d.test_csv, d.num_classes)
    common = dict(means_seed=d.means_seed, separation=d.separation, offset=d.offset)
    train = gen_gaussian_mixture(d.num_classes, d.dim, d.n_per_class, d.spread, d.seed, **common)
    test = gen_gaussian_mixture(
        d.num_classes, d.dim, d.test_n_per_class, d.spread, d.test_seed, **common
    )
    return train, test


@dataclass
class Setup:
    train: Dataset
    test: Dataset
    partition: Partition
    plan: AttackPlan
    clients: list[ClientState]
    schema: ModelSchema


def build_setup(config: ExperimentConfig) -> Setup:
    train, test = load_datasets(config)
    p = config.partition
    part = partition(train, test, p.num_clients, p.mode, p.class_fraction, p.seed)
    plan = AttackPlan.build(config.attack.zeta, config.attack.lam, p.num_clients, config.attack.seed)
    mu = config.strategy.mu if config.strategy.base == "fedprox" else 0.0
    clients = []
    for k, shard in enumerate(part.client_shards):
        malicious = plan.is_malicious(k)
        data = corrupt_labels(shard.train, seed=config.attack.seed * 100003 + k) if malicious else shard.train
        mask = shard.mask if p.mode == "noniid" else None
        clients.append(
            ClientState(k, data, shard.local_test, mask, malicious,
                        plan.epochs(k, config.training.epochs), mu)
        )
    schema = build_schema(config, train.dim, train.num_classes)
    return Setup(train, test, part, plan, clients, schema)


def initial_model(
    config: ExperimentConfig, schema: ModelSchema, foundation: ParamVector | None
) -> ParamVector:
    w0 = init_params(schema, stream(config.run.seed, "init"))
    if config.strategy.foundation != "weight_init":
        return w0
    if foundation is None:
        raise ConfigError("weight_init requires a foundation model")
    names = schema.compatible_layers(foundation.schema)
    if not names:
        log.warning("foundation shares no layers with the model; weight_init is a no-op")
    values = w0.values.copy()
    for name in names:
        lo, hi = schema.offsets()[name]
        values[lo:hi] = foundation.layer(name).reshape(-1)
    return w0.with_values(values)


# -- client side ------------------------------------------------------------


def client_update(
    global_model: ParamVector,
    client: ClientState,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
) -> ParamVector:
    """Train a copy of the global model on the client's (possibly corrupted) data."""
    prox = (client.mu, global_model) if client.mu > 0 else None
    w = global_model
    for _ in range(client.epochs):
        w = sgd_epoch(w, client.train, lr, batch_size, rng, client.mask, prox)
    return w


# -- server loop ------------------------------------------------------------


def run_experiment(
    config: ExperimentConfig,
    foundation: ParamVector | None = None,
    setup: Setup | None = None,
    out_dir: str | Path | None = None,
) -> RunResult:
    """Run ``training.rounds`` rounds and return the per-round records.

    When ``out_dir`` is given, checkpoints are written there at
    ``run.checkpoint_every`` intervals (plus the initial and final model).
    """
    config.validate(check_files=False)
    setup = setup or build_setup(config)
    tr, st, rs = config.training, config.strategy, config.run
    if st.foundation != "none" and foundation is None:
        if not st.foundation_path:
            raise ConfigError(f"strategy.foundation = {st.foundation} needs foundation_path")
        foundation = checkpoint.load(st.foundation_path)

    strategy = AggregationStrategy(st.base, st.mu, st.fedprox_server_term)
    w = initial_model(config, setup.schema, foundation)
    fedbaf = None
    if st.foundation == "fedbaf":
        fedbaf = FedBaFParams(
            st.psi, foundation, stream(rs.seed, "alpha"), static_alpha=st.static_alpha
        )

    ckpt_dir = Path(out_dir) / "checkpoints" if out_dir is not None else None
    if ckpt_dir is not None:
        checkpoint.save(w, ckpt_dir / "round_init.fbaf")

    retain = rs.retain_models or rs.retain_client_models
    result = RunResult([], w, w, foundation)
    if retain:
        result.aggregates, result.globals_ = [], []
    if rs.retain_client_models:
        result.client_models = []
    pooled = None
    if rs.chi_diagnostic:
        pooled = concat([shard.train for shard in setup.partition.client_shards])

    pool = ThreadPoolExecutor(tr.workers) if tr.workers > 1 else None
    try:
        for t in range(tr.rounds):
            try:
                w = _round(t, w, config, setup, strategy, fedbaf, foundation, pooled, result, pool)
            except (ConfigError, FloatingPointError, RuntimeError) as exc:
                raise RoundAbort(t, exc) from exc
            if ckpt_dir is not None and rs.checkpoint_every and (t + 1) % rs.checkpoint_every == 0:
                checkpoint.save(w, ckpt_dir / f"round_{t:04d}.fbaf")
    finally:
        if pool is not None:
            pool.shutdown()
    result.final = w
    if ckpt_dir is not None:
        checkpoint.save(w, ckpt_dir / "final.fbaf")
    return result


def _round(t, w, config, setup, strategy, fedbaf, foundation, pooled, result, pool):
    tr = config.training
    seed = config.run.seed
    sampled = sample_clients(len(setup.clients), tr.participation, stream(seed, "sample", t))
    clients = [setup.clients[k] for k in sampled]

    def work(client):
        return client_update(w, client, tr.lr, tr.batch_size, stream(seed, "client", t, client.id))

    updates = list(pool.map(work, clients)) if pool is not None else [work(c) for c in clients]

    evaluate_now = tr.eval_every <= 1 or t % tr.eval_every == 0 or t == tr.rounds - 1
    local_honest, local_all = math.nan, math.nan
    if evaluate_now:
        accs = [evaluate(u, c.local_test, c.mask)
                for u, c in zip(updates, clients)]
        honest = [a for a, c in zip(accs, clients) if not c.malicious]
        local_all = float(np.mean(accs))
        local_honest = float(np.mean(honest)) if honest else math.nan

    w_prime = aggregate_base([(u, c.n) for u, c in zip(updates, clients)], w, strategy)
    tau = compute_tau(w_prime, w, t)
    alpha = 0.0
    if fedbaf is not None:
        if t == 0:
            fedbaf.record_tau0(tau)
        alpha = draw_alpha(fedbaf, t)
        w_next = fedbaf_bias(w_prime, fedbaf.foundation, alpha, tau)
    else:
        w_next = w_prime

    if not math.isfinite(norm2(w_next)):
        raise FloatingPointError("global model norm overflowed (training diverged)")

    chi = (None, None)
    if pooled is not None and fedbaf is not None and tr.lr > 0:
        grads_sum = (w.values - w_prime.values) / tr.lr
        _, full_grad = full_loss_and_grad(w, pooled)
        chi = chi_diagnostic(w, grads_sum, fedbaf.foundation.values, alpha, tau, tr.lr, full_grad)

    record = RoundRecord(
        t=t,
        sampled=sampled,
        tau=tau,
        alpha=alpha,
        alpha_tau=alpha * tau,
        global_acc=evaluate(w_next, setup.test) if evaluate_now else math.nan,
        local_acc_honest=local_honest,
        local_acc_all=local_all,
        norm_w=norm2(w_next),
        norm_delta=norm2(w_next.values - w.values),
        dist_found=_safe_dist(w_next, foundation),
        chi_norm2=chi[0],
        chi_inner=chi[1],
    )
    result.records.append(record)
    result.sampled_sizes.append([c.n for c in clients])
    if result.aggregates is not None:
        result.aggregates.append(w_prime)
        result.globals_.append(w_next)
    if result.client_models is not None:
        result.client_models.append(updates)
    log.debug("round %d tau=%.4g acc=%.4f", t, tau, record.global_acc)
    return w_next


def _safe_dist(w: ParamVector, foundation: ParamVector | None) -> float:
    if foundation is None:
        return math.nan
    try:
        return dist_metric(w, foundation)
    except ConfigError:
        return math.nan


# -- round log ---------------------------------------------------------------


def _cell(value) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def rounds_csv(records: list[RoundRecord], debug_alpha: bool = False) -> str:
    columns = ROUND_COLUMNS + (["alpha"] if debug_alpha else [])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for rec in records:
        writer.writerow([_cell(getattr(rec, c)) for c in columns])
    return buf.getvalue()


def read_rounds_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (float(v) if v != "" else math.nan) if k != "t" else int(v) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]
