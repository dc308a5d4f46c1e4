"""Server-side aggregation: client sampling, base averaging, and the
foundation-biased step (tau, alpha, convex blend toward the foundation)."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import ConfigError, ParamVector, norm2, normalize, weighted_mean


class DegenerateRound(RuntimeError):
    """The first round produced no movement, so alpha cannot be scaled."""


class NoCompatibleLayers(UserWarning):
    pass


def sample_clients(num_clients: int, fraction: float, rng: np.random.Generator) -> list[int]:
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("participation fraction must lie in (0, 1]")
    if num_clients < 1:
        raise ConfigError("need at least one client")
    m = max(int(math.floor(fraction * num_clients + 1e-9)), 1)
    return sorted(int(k) for k in rng.choice(num_clients, size=m, replace=False))


@dataclass(frozen=True)
class AggregationStrategy:
    kind: str = "fedavg"
    mu: float = 0.0
    server_term: bool = False

    def __post_init__(self):
        if self.kind not in ("fedavg", "fedprox"):
            raise ConfigError(f"unknown aggregation {self.kind!r}")
        if self.mu < 0:
            raise ConfigError("mu must be >= 0")

    @property
    def client_mu(self) -> float:
        return self.mu if self.kind == "fedprox" else 0.0


def aggregate_base(
    updates: list[tuple[ParamVector, int]],
    global_model: ParamVector,
    strategy: AggregationStrategy = AggregationStrategy(),
) -> ParamVector:
    """Sample-count weighted mean of client models.

    With ``strategy.server_term`` on FedProx, the mean additionally has
    ``mu`` times the weighted mean drift ``w_k - w_t`` subtracted.
    """
    if not updates:
        raise ConfigError("no client updates to aggregate")
    models = [u for u, _ in updates]
    counts = [n for _, n in updates]
    mean = weighted_mean(models, counts)
    if strategy.kind == "fedprox" and strategy.server_term and strategy.mu:
        drift = mean.values - global_model.values
        return mean.with_values(mean.values - strategy.mu * drift)
    return mean


def compute_tau(w_prime: ParamVector, w_prev: ParamVector, t: int) -> float:
    """Distance between consecutive normalized models, damped by sqrt(t+1)."""
    if t < 0:
        raise ConfigError("round index must be >= 0")
    if w_prime.schema != w_prev.schema:
        raise ConfigError("schema mismatch")
    diff = normalize(w_prime).values - normalize(w_prev).values
    return norm2(diff) / math.sqrt(t + 1)


@dataclass
class FedBaFParams:
    """Server-private state for the foundation bias.

    ``tau0`` is captured once after the first round. With ``static_alpha`` a
    single draw is reused every round (only useful as an attack target).
    """

    psi: float
    foundation: ParamVector
    alpha_rng: np.random.Generator = field(repr=False)
    static_alpha: bool = False
    tau0: float | None = None
    _static_value: float | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.psi < 0:
            raise ConfigError("psi must be >= 0")

    def record_tau0(self, tau: float) -> None:
        if self.tau0 is not None:
            raise RuntimeError("tau0 is already recorded")
        self.tau0 = float(tau)


def draw_alpha(params: FedBaFParams, t: int) -> float:
    if params.tau0 is None:
        raise RuntimeError("tau0 must be recorded before drawing alpha")
    if params.tau0 == 0.0:
        raise DegenerateRound(
            "tau_0 = 0: clients returned the initial model unchanged in round 0"
        )
    if params.static_alpha and params._static_value is not None:
        return params._static_value
    alpha = params.psi / params.tau0 * params.alpha_rng.uniform(1.0, 2.0)
    if params.static_alpha:
        params._static_value = alpha
    return alpha


def fedbaf_bias(
    w_prime: ParamVector, w_pre: ParamVector, alpha: float, tau: float
) -> ParamVector:
    """Blend compatible layers toward the foundation; others pass through."""
    names = w_prime.schema.compatible_layers(w_pre.schema)
    if not names:
        warnings.warn(
            "foundation model shares no compatible layers; bias step skipped",
            NoCompatibleLayers,
            stacklevel=2,
        )
        return w_prime
    weight = alpha * tau
    out = w_prime.values.copy()
    offsets = w_prime.schema.offsets()
    for name in names:
        lo, hi = offsets[name]
        out[lo:hi] = (out[lo:hi] + weight * w_pre.layer(name).reshape(-1)) / (1.0 + weight)
    return w_prime.with_values(out)


def compatible_mask(schema, other_schema) -> np.ndarray:
    """Boolean mask over ``schema``'s flat vector selecting compatible layers."""
    mask = np.zeros(schema.size, dtype=bool)
    offsets = schema.offsets()
    for name in schema.compatible_layers(other_schema):
        lo, hi = offsets[name]
        mask[lo:hi] = True
    return mask


def align(w_pre: ParamVector, schema) -> np.ndarray:
    """Foundation values laid out in ``schema`` order (NaN where incompatible)."""
    out = np.full(schema.size, np.nan)
    offsets = schema.offsets()
    for name in schema.compatible_layers(w_pre.schema):
        lo, hi = offsets[name]
        out[lo:hi] = w_pre.layer(name).reshape(-1)
    return out
