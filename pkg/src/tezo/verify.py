# SPDX-License-Identifier: LGPL-3.0-or-later

"""
This module implements Monte Carlo and algebraic checks of the estimator.

All bands are derived from the samples themselves: per-entry standard errors
for means, and the spread of the per-trial squared error for the variance
ratio. Chunks are drawn from per-chunk seeds and reduced in a fixed order,
so a report is reproducible bitwise from its seed.
"""

from .common import PerturbationMethod, RunStatus
from .estimators import (
    build_perturbations,
    delta_coefficient,
    delta_rho_coefficient,
    spsa_kappa,
    zo_gradient,
)
from .lowrank import FactorSet, LayerShape, expand_separable, init_factors
from .optimizers import lookup_optimizer, run_config
from .params import ModelParams
from .report import RunConfig
from .rng import GaussianStream, SeedSchedule, make_generator, spawn_seeds
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple
import logging
import math

import numpy as np

logger = logging.getLogger(__name__)

GRAD_STREAM = 6
MC_STREAM = 7
# Gaussian values per Monte Carlo chunk
CHUNK_ELEMENTS = 1 << 22


class _Moments:
    """Running sums of per-trial estimates g and squared errors ‖g - G‖²."""
    def __init__(self, shape: Tuple[int, ...]):
        self.n = 0
        self.s1 = np.zeros(shape)
        self.s2 = np.zeros(shape)
        self.e1 = 0.0
        self.e2 = 0.0

    def add(self, est: np.ndarray, target: np.ndarray) -> None:
        self.n += est.shape[0]
        self.s1 += est.sum(axis=0)
        self.s2 += (est * est).sum(axis=0)
        err = ((est - target) ** 2).reshape(est.shape[0], -1).sum(axis=1)
        self.e1 += float(err.sum())
        self.e2 += float((err * err).sum())

    def mean(self) -> np.ndarray:
        return self.s1 / self.n

    def se(self) -> np.ndarray:
        mean = self.mean()
        var = np.maximum(self.s2 - self.n * mean * mean, 0.0) / max(self.n - 1, 1)
        return np.sqrt(var / self.n)

    def error_mean(self) -> float:
        return self.e1 / self.n

    def error_se(self) -> float:
        mean = self.error_mean()
        var = max(self.e2 - self.n * mean * mean, 0.0) / max(self.n - 1, 1)
        return math.sqrt(var / self.n)


def _z_scores(bias: np.ndarray, se: np.ndarray) -> np.ndarray:
    z = np.zeros_like(bias)
    nz = se > 0
    z[nz] = np.abs(bias[nz]) / se[nz]
    z[~nz & (bias != 0)] = np.inf
    return z


@dataclass
class StatReport:
    """Monte Carlo statistics of (1/r) κ Z against the true gradient.

    Attributes:
      grad (np.ndarray): The gradient G the estimates target.
      mean (np.ndarray): Per-entry sample mean of the estimates.
      se (np.ndarray): Per-entry standard error of the mean.
      emp_var (float): Sample mean of ‖(1/r) κ Z - G‖².
      pred_var (float): δ ‖G‖².
      ratio (float): emp_var / pred_var, NaN when G = 0.
      ratio_se (float): Standard error of ratio.
    """
    m: int
    n: int
    r: int
    trials: int
    seed: int
    rho: Optional[float]
    grad: np.ndarray
    mean: np.ndarray
    se: np.ndarray
    emp_var: float
    emp_var_se: float
    delta: float
    delta_rho: float

    @property
    def bias(self) -> np.ndarray:
        return self.mean - self.grad

    @property
    def z(self) -> np.ndarray:
        return _z_scores(self.bias, self.se)

    @property
    def max_z(self) -> float:
        return float(self.z.max())

    @property
    def pred_var(self) -> float:
        return self.delta * float(np.sum(self.grad * self.grad))

    @property
    def ratio(self) -> float:
        if self.pred_var == 0.0:
            return math.nan
        return self.emp_var / self.pred_var

    @property
    def ratio_se(self) -> float:
        if self.pred_var == 0.0:
            return math.nan
        return self.emp_var_se / self.pred_var

    def rows(self) -> List[tuple]:
        bias, z = self.bias, self.z
        return [
            (i, j, float(self.grad[i, j]), float(self.mean[i, j]),
             float(bias[i, j]), float(self.se[i, j]), float(z[i, j]),
             self.ratio, self.pred_var, self.delta_rho)
            for i in range(self.m) for j in range(self.n)
        ]


STAT_COLUMNS = [
    "row", "col", "grad", "mean", "entry_bias", "se", "z",
    "emp_var_ratio", "delta_pred", "delta_rho",
]


def _chunks(total: int, size: int, seed: int) -> List[Tuple[int, int]]:
    count = (total + size - 1) // size
    seeds = spawn_seeds(SeedSchedule(seed).substream(MC_STREAM), count)
    return [
        (min(size, total - i * size), s) for i, s in enumerate(seeds)
    ]


def _chunk_size(m: int, n: int, r: int) -> int:
    return max(1, CHUNK_ELEMENTS // ((m + n + 1) * r + m * n))


def random_gradient(m: int, n: int, seed: int) -> np.ndarray:
    return make_generator(
        SeedSchedule(seed).substream(GRAD_STREAM).derive(0)
    ).standard_normal((m, n))


def theorem1_check(
    m: int,
    n: int,
    r: int,
    trials: int,
    seed: int,
    rho: Optional[float] = None,
    grad: Optional[np.ndarray] = None,
) -> StatReport:
    """Sample (1/r) κ Z with u, v and τ redrawn every trial.

    With rho None, κ = ⟨G, Z⟩ is the limit ρ -> 0. Otherwise κ is the
    two-point difference of f(X) = ½‖X‖² - ⟨W - G, X⟩ at a random W, whose
    gradient at W is G.
    """
    LayerShape(m, n, r)
    G = random_gradient(m, n, seed) if grad is None else np.asarray(grad, float)
    if G.shape != (m, n):
        raise ValueError(f"gradient shape {G.shape} is not ({m}, {n})")
    W = G + make_generator(
        SeedSchedule(seed).substream(GRAD_STREAM).derive(1)
    ).standard_normal((m, n))
    B = W - G

    def f(X: np.ndarray) -> np.ndarray:
        return 0.5 * np.einsum("bij,bij->b", X, X) - np.einsum("bij,ij->b", X, B)

    acc = _Moments((m, n))
    for count, chunk_seed in _chunks(trials, _chunk_size(m, n, r), seed):
        stream = GaussianStream(chunk_seed)
        u = stream.normal(count, m, r)
        v = stream.normal(count, n, r)
        tau = stream.normal(count, r)
        Z = np.einsum("bis,bs,bjs->bij", u, tau, v)
        if rho is None:
            kappa = np.einsum("bij,ij->b", Z, G)
        else:
            kappa = (f(W + rho * Z) - f(W - rho * Z)) / (2.0 * rho)
        acc.add(kappa[:, None, None] * Z / r, G)
        logger.debug("theorem check: %d of %d trials", acc.n, trials)
    return StatReport(
        m=m, n=n, r=r, trials=trials, seed=seed, rho=rho, grad=G,
        mean=acc.mean(), se=acc.se(),
        emp_var=acc.error_mean(), emp_var_se=acc.error_se(),
        delta=delta_coefficient(m, n, r),
        delta_rho=delta_rho_coefficient(m, n, r),
    )


def two_point_stats(
    objective: Any,
    model: ModelParams,
    r: int,
    rho: float,
    trials: int,
    seed: int,
) -> StatReport:
    """Monte Carlo of (1/r) κ Z through the in-place estimator.

    The factors are refreshed every trial, so u, v and τ are all fresh. The
    model must hold a single matrix; its parameters are restored after each
    estimate.
    """
    if len(model) != 1 or not next(iter(model)).is_matrix:
        raise ValueError("two_point_stats needs a single-matrix model")
    p = next(iter(model))
    m, n = p.value.shape
    G = objective.exact_grad(model)[p.name]
    perts = build_perturbations(
        model, PerturbationMethod.tezo, {p.name: r}, seed, factor_refresh=1
    )
    schedule = SeedSchedule(seed).substream(MC_STREAM)
    acc = _Moments((m, n))
    for t in range(1, trials + 1):
        estimate = spsa_kappa(objective, model, perts, rho, schedule.derive(t), None, t)
        g = zo_gradient(estimate, model, perts, unbiased=True)[p.name]
        acc.add(g[None], G)
    return StatReport(
        m=m, n=n, r=r, trials=trials, seed=seed, rho=rho, grad=G,
        mean=acc.mean(), se=acc.se(),
        emp_var=acc.error_mean(), emp_var_se=acc.error_se(),
        delta=delta_coefficient(m, n, r),
        delta_rho=delta_rho_coefficient(m, n, r),
    )


def separable_term(fs: FactorSet, tau: np.ndarray) -> np.ndarray:
    """Σ_s τ_s² (u_s² ∘ v_s²)."""
    return expand_separable(fs, np.asarray(tau) ** 2)


def cross_term(fs: FactorSet, tau: np.ndarray) -> np.ndarray:
    """Σ_{p≠q} τ_p τ_q (u_p u_q ∘ v_p v_q), summed pair by pair."""
    out = np.zeros(fs.shape)
    for p in range(fs.r):
        for q in range(fs.r):
            if p != q:
                out += tau[p] * tau[q] * np.outer(
                    fs.u[:, p] * fs.u[:, q], fs.v[:, p] * fs.v[:, q]
                )
    return out


@dataclass
class CrossTermReport:
    """Per-entry mean and standard error of the cross term."""
    m: int
    n: int
    r: int
    trials: int
    seed: int
    mean: np.ndarray
    se: np.ndarray

    @property
    def z(self) -> np.ndarray:
        return _z_scores(self.mean, self.se)

    @property
    def max_z(self) -> float:
        return float(self.z.max())

    def rows(self) -> List[tuple]:
        z = self.z
        return [
            (i, j, float(self.mean[i, j]), float(self.se[i, j]), float(z[i, j]))
            for i in range(self.m) for j in range(self.n)
        ]


CROSS_COLUMNS = ["row", "col", "mean", "se", "z"]


def cross_term_stats(
    m: int, n: int, r: int, trials: int, seed: int
) -> CrossTermReport:
    """Monte Carlo mean of the cross term with u, v, τ redrawn every trial.

    The cross term of a draw is (Σ_s τ_s u_s ∘ v_s)² minus the separable
    term. For r = 1 it is identically zero and no samples are drawn.
    """
    LayerShape(m, n, r)
    if r == 1:
        zero = np.zeros((m, n))
        return CrossTermReport(m, n, r, trials, seed, zero, zero.copy())
    acc = _Moments((m, n))
    target = np.zeros((m, n))
    for count, chunk_seed in _chunks(trials, _chunk_size(m, n, r), seed):
        stream = GaussianStream(chunk_seed)
        u = stream.normal(count, m, r)
        v = stream.normal(count, n, r)
        tau = stream.normal(count, r)
        Z = np.einsum("bis,bs,bjs->bij", u, tau, v)
        sep = np.einsum("bis,bs,bjs->bij", u * u, tau * tau, v * v)
        acc.add(Z * Z - sep, target)
        logger.debug("cross term: %d of %d trials", acc.n, trials)
    return CrossTermReport(m, n, r, trials, seed, acc.mean(), acc.se())


@dataclass
class MomentErrorTrace:
    """Accumulated error of the separable second moment.

    Attributes:
      norms (np.ndarray): ‖V_t - V̂_t‖_F / (mn) for t = 0..T.
      last_error (np.ndarray): E_T = (V_T - V̂_T) / (mn).
      identity_residual (float): Largest |Z² - separable - cross| seen when
        the identity was checked, else NaN.
    """
    m: int
    n: int
    r: int
    beta2: float
    seed: int
    norms: np.ndarray
    last_error: np.ndarray
    identity_residual: float = math.nan

    @property
    def terminal(self) -> float:
        return float(self.norms[-1])


def accumulated_moment_error(
    sizes: Sequence[Tuple[int, int]],
    r: int,
    T: int,
    beta2: float,
    seeds: Sequence[int],
    kappa: float = 1.0,
    check_identity: bool = False,
) -> List[MomentErrorTrace]:
    """Run the dense and separable second-moment recursions side by side.

    Per seed the factors u, v are drawn once and τ is drawn every step from
    the seed's schedule; both recursions consume the same draws. With
    check_identity the dense square is compared against separable plus
    cross term at every step.
    """
    traces = []
    for m, n in sizes:
        for seed in seeds:
            fs = init_factors(LayerShape(m, n, r), seed, layer_id=f"{m}x{n}")
            schedule = SeedSchedule(seed).substream(MC_STREAM)
            V = np.zeros((m, n))
            V_hat = np.zeros((m, n))
            norms = np.zeros(T + 1)
            residual = 0.0 if check_identity else math.nan
            for t in range(T):
                tau = kappa * GaussianStream(schedule.derive(t)).sample(r)
                Z = (fs.u * tau) @ fs.v.T
                dense = Z * Z
                sep = separable_term(fs, tau)
                if check_identity:
                    diff = dense - sep - cross_term(fs, tau)
                    residual = max(residual, float(np.abs(diff).max()))
                V = beta2 * V + (1.0 - beta2) * dense
                V_hat = beta2 * V_hat + (1.0 - beta2) * sep
                norms[t + 1] = np.linalg.norm(V - V_hat) / (m * n)
            traces.append(MomentErrorTrace(
                m=m, n=n, r=r, beta2=beta2, seed=seed, norms=norms,
                last_error=(V - V_hat) / (m * n), identity_residual=residual,
            ))
            logger.debug(
                "moment error %dx%d seed %d: terminal %.3g", m, n, seed, norms[-1]
            )
    return traces


@dataclass
class OneStepError:
    """Error of the separable term after a single step with κ = 1.

    Attributes:
      abs_error (float): Mean over trials of ‖cross‖_F / (mn).
      rel_error (float): Mean over trials of ‖cross‖_F / ‖Z²‖_F.
    """
    m: int
    n: int
    r: int
    trials: int
    abs_error: float
    rel_error: float


def one_step_error(
    sizes: Sequence[Tuple[int, int]], r: int, trials: int, seed: int
) -> List[OneStepError]:
    out = []
    for m, n in sizes:
        LayerShape(m, n, r)
        abs_sum = 0.0
        rel_sum = 0.0
        for count, chunk_seed in _chunks(trials, _chunk_size(m, n, r), seed):
            stream = GaussianStream(chunk_seed)
            u = stream.normal(count, m, r)
            v = stream.normal(count, n, r)
            tau = stream.normal(count, r)
            Z = np.einsum("bis,bs,bjs->bij", u, tau, v)
            sq = Z * Z
            cross = sq - np.einsum("bis,bs,bjs->bij", u * u, tau * tau, v * v)
            norm_cross = np.sqrt(np.einsum("bij,bij->b", cross, cross))
            norm_sq = np.sqrt(np.einsum("bij,bij->b", sq, sq))
            abs_sum += float(norm_cross.sum()) / (m * n)
            rel_sum += float((norm_cross / norm_sq).sum())
        out.append(OneStepError(m, n, r, trials, abs_sum / trials, rel_sum / trials))
    return out


@dataclass
class RaceResult:
    optimizer: str
    seed: int
    factor_refresh: Optional[int]
    steps_to_target: Optional[int]
    final_ratio: float
    status: str


def convergence_race(
    base: RunConfig,
    etas: Dict[str, float],
    seeds: Sequence[int],
    target_ratio: float = 1e-3,
) -> List[RaceResult]:
    """Steps each optimizer needs to reach target_ratio x initial loss.

    Every optimizer runs on the same seeds; steps_to_target is None when the
    budget base.steps runs out first. factor_refresh is None for optimizers
    without fixed factors and for TeZO runs that keep u, v for the whole run.
    """
    results = []
    for name, eta in etas.items():
        for seed in seeds:
            config = replace(
                base, optimizer=name, eta=eta, seed=seed,
                target_ratio=target_ratio,
            ).validate()
            report = run_config(config)
            losses = report.column("loss")
            reached = report.status == RunStatus.converged
            results.append(RaceResult(
                optimizer=name,
                seed=seed,
                factor_refresh=(
                    config.factor_refresh
                    if lookup_optimizer(name)[0] == PerturbationMethod.tezo
                    else None
                ),
                steps_to_target=report.rows[-1][0] if reached else None,
                final_ratio=losses[-1] / losses[0] if losses[0] else math.nan,
                status=str(report.status),
            ))
            logger.info(
                "%s seed %d: %s after %d steps",
                name, seed, report.status, report.rows[-1][0],
            )
    return results
