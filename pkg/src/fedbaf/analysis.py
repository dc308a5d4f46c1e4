"""Checks for the improvement/error-bound conditions, extraction resistance,
correction-term diagnostics and MAC accounting."""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy import optimize

from .aggregation import align, compatible_mask, fedbaf_bias
from .model import ConfigError, ModelSchema, ParamVector, _loss_grad, evaluate, norm2

UNCONSTRAINED = math.inf


class AnalysisPrecondition(RuntimeError):
    """Inputs required by a check are missing (e.g. models not retained)."""


def _vals(v) -> np.ndarray:
    return v.values if isinstance(v, ParamVector) else np.asarray(v, dtype=np.float64)


# -- improvement condition ----------------------------------------------------


def prop1_alpha_bound(w_prime, w_pre, w_star, tau: float) -> float:
    """Largest alpha for which biasing provably moves closer to ``w_star``.

    Returns ``UNCONSTRAINED`` (inf) when the aggregate is at least as far from
    the optimum as the foundation is, since then any positive alpha works.
    """
    if tau <= 0:
        raise ConfigError("tau must be positive")
    beta = norm2(_vals(w_prime) - _vals(w_star))
    gamma = norm2(_vals(w_pre) - _vals(w_star))
    if beta >= gamma:
        return UNCONSTRAINED
    return 2.0 * beta**2 / ((gamma**2 - beta**2) * tau)


def prop1_exact_alpha_bound(w_prime, w_pre, w_star, tau: float) -> float:
    """Exact improvement threshold on alpha, keeping the cross term.

    Expanding the squared distance gives the condition
    ``a*tau*(gamma^2 - beta^2) < 2*(beta^2 - u.v)`` with ``u = w' - w*`` and
    ``v = w_pre - w*``. It coincides with ``prop1_alpha_bound`` when u.v = 0.
    Returns 0.0 when no positive alpha improves.
    """
    if tau <= 0:
        raise ConfigError("tau must be positive")
    u = _vals(w_prime) - _vals(w_star)
    v = _vals(w_pre) - _vals(w_star)
    bb, gg, uv = float(u @ u), float(v @ v), float(u @ v)
    if gg <= bb:
        return UNCONSTRAINED if bb > uv else 0.0
    return max(0.0, 2.0 * (bb - uv) / ((gg - bb) * tau))


def prop1_improvement_check(w_prime, w_pre, w_star, alpha: float, tau: float) -> bool:
    if isinstance(w_prime, ParamVector) and isinstance(w_pre, ParamVector):
        biased = fedbaf_bias(w_prime, w_pre, alpha, tau).values
    else:
        at = alpha * tau
        biased = (_vals(w_prime) + at * _vals(w_pre)) / (1.0 + at)
    return norm2(biased - _vals(w_star)) < norm2(_vals(w_prime) - _vals(w_star))


# -- error bound ----------------------------------------------------------------


@dataclass
class BoundRow:
    t: int
    lhs: float
    delta: float
    gamma: float
    alpha_tau: float
    rhs: float
    holds: bool
    proximity: bool  # gamma <= delta

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def prop2_bound_check(
    records: Sequence,
    client_models: Sequence[Sequence[ParamVector]] | None,
    globals_: Sequence[ParamVector] | None,
    w_star: ParamVector,
    gamma: float,
    tol: float = 1e-9,
) -> list[BoundRow]:
    """Check ``|w_t - w*| <= (delta_t + a*tau*gamma) / (1 + a*tau)`` per round.

    ``client_models[i]`` are the models returned by the clients sampled in
    ``records[i]``; ``globals_[i]`` is the global model produced that round.
    """
    if client_models is None or globals_ is None:
        raise AnalysisPrecondition(
            "per-round client models are required; rerun with run.retain_client_models = true"
        )
    if not (len(records) == len(client_models) == len(globals_)):
        raise AnalysisPrecondition("records and retained models are misaligned")
    star = _vals(w_star)
    rows = []
    for rec, clients, w_t in zip(records, client_models, globals_):
        if not clients:
            raise AnalysisPrecondition(f"round {rec.t}: no retained client models")
        lhs = norm2(w_t.values - star)
        delta = max(norm2(c.values - star) for c in clients)
        at = rec.alpha_tau
        rhs = (delta + at * gamma) / (1.0 + at)
        rows.append(BoundRow(rec.t, lhs, delta, gamma, at, rhs, lhs <= rhs + tol, gamma <= delta))
    return rows


# -- optimum proxy ---------------------------------------------------------------


@dataclass
class OptimumProxy:
    w_star: ParamVector
    provenance: dict = field(default_factory=dict)


def optimum_proxy(
    init: ParamVector, data, grad_tol: float = 1e-4, max_iter: int = 20000
) -> OptimumProxy:
    """Centralized full-batch minimization of the pooled objective (L-BFGS)."""
    schema = init.schema
    x, y = data.features, data.labels

    def fun(w):
        return _loss_grad(schema, w, x, y, None)

    res = optimize.minimize(
        fun, init.values.copy(), jac=True, method="L-BFGS-B",
        options={"maxiter": max_iter, "gtol": grad_tol * 1e-3, "ftol": 0.0, "maxcor": 30},
    )
    loss, grad = fun(res.x)
    gnorm = norm2(grad)
    if gnorm >= grad_tol:
        raise AnalysisPrecondition(
            f"optimum proxy did not converge: |grad| = {gnorm:.3e} >= {grad_tol:g}"
        )
    return OptimumProxy(
        ParamVector(schema, res.x),
        {"algorithm": "L-BFGS-B full batch", "iterations": int(res.nit),
         "final_loss": float(loss), "grad_norm": gnorm},
    )


# -- distance / extraction ---------------------------------------------------------


@dataclass
class DistResult:
    value: float
    used: int
    excluded: int


def dist_detail(w_global: ParamVector, w_pre: ParamVector, eps: float = 1e-12) -> DistResult:
    mask = compatible_mask(w_global.schema, w_pre.schema)
    if not mask.any():
        raise ConfigError("no compatible parameters between global and foundation models")
    w = w_global.values[mask]
    p = align(w_pre, w_global.schema)[mask]
    keep = np.abs(w) >= eps
    if not keep.any():
        raise ConfigError("every compatible global weight is zero")
    value = float(np.mean(np.abs(w[keep] - p[keep]) / np.abs(w[keep])))
    return DistResult(value, int(keep.sum()), int((~keep).sum()))


def dist_metric(w_global: ParamVector, w_pre: ParamVector) -> float:
    """Mean elementwise |w - w_pre| / |w| over compatible layers."""
    return dist_detail(w_global, w_pre).value


def noise_robustness(
    w_pre: ParamVector, error_rates: Sequence[float], eval_set, seed: int
) -> list[tuple[float, float]]:
    """Accuracy after adding per-layer Gaussian noise of norm ``rate * |layer|``."""
    from .rng import stream

    curve = []
    for i, rate in enumerate(error_rates):
        if rate < 0:
            raise ConfigError("error rates must be >= 0")
        rng = stream(seed, "noise", i)
        noisy = w_pre.values.copy()
        for name, (lo, hi) in w_pre.schema.offsets().items():
            layer = noisy[lo:hi]
            direction = rng.standard_normal(layer.size)
            size = norm2(layer)
            if rate == 0 or size == 0:
                continue
            noisy[lo:hi] = layer + direction * (rate * size / norm2(direction))
        curve.append((float(rate), evaluate(ParamVector(w_pre.schema, noisy), eval_set)))
    return curve


@dataclass(frozen=True)
class ObservedRound:
    """What colluding clients can see after one round."""

    tau: float
    w_next: np.ndarray   # w_{t+1}
    w_prime: np.ndarray  # w'_{t+1}


def reconstruct_foundation(obs: ObservedRound, alpha: float) -> np.ndarray:
    """Invert the blend for a known alpha."""
    at = alpha * obs.tau
    return ((1.0 + at) * _vals(obs.w_next) - _vals(obs.w_prime)) / at


def estimate_static_alpha(
    first: ObservedRound, second: ObservedRound, tol: float = 1e-10, max_expand: int = 60
) -> float:
    """Alpha minimizing the two-round reconstruction residual, by bisection.

    The residual between the two reconstructions is ``a + b / alpha``; the
    derivative of its squared norm changes sign where ``a.b + |b|^2 / alpha``
    crosses zero, which is monotone in alpha and so bracketable.
    """
    if first.tau <= 0 or second.tau <= 0:
        raise ConfigError("chosen rounds have tau = 0; pick other rounds")
    w1, w2 = _vals(first.w_next), _vals(second.w_next)
    b = (w1 - _vals(first.w_prime)) / first.tau - (w2 - _vals(second.w_prime)) / second.tau
    a = w1 - w2
    ab, bb = float(a @ b), float(b @ b)
    if bb == 0.0:
        raise ConfigError("residual does not depend on alpha")

    def g(alpha: float) -> float:
        return ab + bb / alpha

    lo, hi = 0.0, 10.0 / first.tau
    for _ in range(max_expand):
        if g(hi) <= 0:
            break
        lo, hi = hi, hi * 2.0
    else:
        return hi
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if g(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def extraction_attack(
    static_rounds: tuple[ObservedRound, ObservedRound],
    random_rounds: tuple[ObservedRound, ObservedRound],
    w_pre,
) -> tuple[float, float]:
    """Relative foundation-recovery error for a static-alpha and a random-alpha log."""
    truth = _vals(w_pre)
    errors = []
    for first, second in (static_rounds, random_rounds):
        alpha = estimate_static_alpha(first, second)
        guess = reconstruct_foundation(first, alpha)
        errors.append(norm2(guess - truth) / norm2(truth))
    return errors[0], errors[1]


# -- correction term ----------------------------------------------------------------


def chi_diagnostic(
    w_t, client_grads_sum, w_pre, alpha: float, tau: float, eta: float, full_grad
) -> tuple[float, float]:
    """Squared norm of the correction term and its inner product with grad F."""
    at = alpha * tau
    bracket = _vals(w_t) - eta * _vals(client_grads_sum)
    chi = at * (bracket - (1.0 - at) * _vals(w_pre))
    return float(chi @ chi), float(_vals(full_grad) @ chi)


# -- MAC accounting -----------------------------------------------------------------


@dataclass
class MacReport:
    macs_per_sample: int
    mean_macs: float
    mace: int
    tmac: int
    rounds_to_threshold: int
    participants: int = 0
    median_samples: float = 0.0
    epochs: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def mace(participants: int, median_samples, mean_macs) -> Fraction:
    return participants * Fraction(median_samples) * Fraction(mean_macs)


def tmac(rounds: int, epochs: int, mace_value) -> Fraction:
    return rounds * epochs * Fraction(mace_value)


def mac_report(
    schema: ModelSchema,
    client_sizes: Sequence[int],
    sampled_sizes: Sequence[Sequence[int]],
    epochs: int,
    rounds: int,
) -> MacReport:
    """MAC totals for a run that needed ``rounds`` rounds.

    ``client_sizes`` are the training-set sizes of every client (for the
    median); ``sampled_sizes`` holds, per round, the sizes of the clients
    that participated.
    """
    per_sample = schema.macs_per_sample
    slots = [n for round_sizes in sampled_sizes for n in round_sizes]
    if not slots:
        raise ConfigError("no participating clients")
    m = len(sampled_sizes[0])
    mean = Fraction(sum(per_sample * n for n in slots), len(slots))
    median = Fraction(statistics.median(client_sizes)).limit_denominator(2)
    mace_value = mace(m, median, mean)
    total = tmac(rounds, epochs, mace_value)
    return MacReport(
        per_sample, float(mean), round(mace_value), round(total), rounds,
        m, float(median), epochs,
    )
