# SPDX-License-Identifier: LGPL-3.0-or-later

"""
This module implements the zeroth-order update rules and the training loop.

TeZO variants keep their state in factor space: per layer a vector τ_M of
length r (momentum) and τ_V (Adam). The dense M_t and V_t are only expanded
row block by row block while the update is applied. Dense MeZO variants keep
full m x n buffers.

Adam follows the update as written: no bias correction, ε inside the square
root, G_t = M_t / √(V_t + ε).
"""

from .common import (
    OptimizerVariant,
    PerturbationMethod,
    RunStatus,
    ConfigError,
    NonFiniteLossError,
    UnexpectedTypeError,
)
from .estimators import (
    Perturbation,
    ZoEstimate,
    build_perturbations,
    replay_draws,
    spsa_kappa,
)
from .lowrank import ROW_BLOCK, FactorSet, apply_rank_sum
from .objectives import build_objective
from .params import ModelParams
from .rank_select import RankPolicy, select_ranks
from .report import RunConfig, RunReport
from .rng import GaussianStream, SeedSchedule
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Tuple
import logging
import math
import time

import numpy as np

logger = logging.getLogger(__name__)

BATCH_STREAM = 1
SWEEP_STREAM = 3


@dataclass
class LayerState:
    """Optimizer buffers of one parameter.

    Attributes:
      tau_m (np.ndarray): Factor-space first moment, length r.
      tau_v (np.ndarray): Factor-space second moment, length r.
      m (np.ndarray): Dense first moment, same shape as the parameter.
      v (np.ndarray): Dense second moment, same shape as the parameter.
      factor_seed (int): Seed of the factor set tau_m and tau_v refer to.
    """
    tau_m: Optional[np.ndarray] = None
    tau_v: Optional[np.ndarray] = None
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    factor_seed: Optional[int] = None

    def floats(self) -> int:
        return sum(
            a.size for a in (self.tau_m, self.tau_v, self.m, self.v)
            if a is not None
        )


@dataclass
class OptimizerState:
    """Hyperparameters and per-layer buffers.

    Attributes:
      variant (OptimizerVariant): SGD, momentum or Adam.
      eta (float): Learning rate.
      rho (float): Perturbation rate.
      beta1 (float): Momentum coefficient.
      beta2 (float): Second-moment coefficient.
      eps (float): Smoothing term inside the square root.
      step (int): Number of updates applied.
      layers (dict): LayerState per parameter name.
    """
    variant: OptimizerVariant = OptimizerVariant.sgd
    eta: float = 1e-3
    rho: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-5
    step: int = 0
    layers: Dict[str, LayerState] = field(default_factory=dict)

    def layer(self, name: str) -> LayerState:
        if name not in self.layers:
            self.layers[name] = LayerState()
        return self.layers[name]

    def state_floats(self) -> int:
        """Number of floats held by the buffers."""
        return sum(s.floats() for s in self.layers.values())


def expected_state_floats(
    variant: OptimizerVariant, perturbations: Dict[str, Perturbation]
) -> int:
    """Closed-form buffer size: r_l or 2r_l per TeZO layer, mn or 2mn per
    densely updated parameter, nothing for SGD."""
    copies = {
        OptimizerVariant.sgd: 0,
        OptimizerVariant.momentum: 1,
        OptimizerVariant.adam: 2,
    }[variant]
    total = 0
    for pert in perturbations.values():
        if pert.method == PerturbationMethod.tezo:
            total += copies * pert.rank
        else:
            total += copies * int(np.prod(pert.shape))
    return total


def _tau(fs: FactorSet, estimate: ZoEstimate, tau: Optional[np.ndarray]):
    if tau is None:
        tau = GaussianStream(estimate.seed).sample(fs.r)
    return np.asarray(tau, dtype=np.float64)


def _factor_state(layer: LayerState, fs: FactorSet) -> LayerState:
    # τ_M and τ_V are coordinates in the basis of one factor set
    if layer.factor_seed != fs.seed or layer.tau_m is None:
        layer.tau_m = np.zeros(fs.r)
        layer.factor_seed = fs.seed
        layer.tau_v = None
    return layer


def step_tezo(
    W: np.ndarray,
    state: OptimizerState,
    fs: FactorSet,
    estimate: ZoEstimate,
    tau: Optional[np.ndarray] = None,
) -> None:
    """W <- W - η κ Σ_s τ_s (u_s ∘ v_s), as streamed rank-1 updates.

    tau defaults to the first r draws of the estimate's seed, which is the
    layout of a single-layer model.
    """
    tau = _tau(fs, estimate, tau)
    apply_rank_sum(W, fs.u, fs.v, tau, -state.eta * estimate.kappa)


def step_tezo_m(
    W: np.ndarray,
    state: OptimizerState,
    fs: FactorSet,
    estimate: ZoEstimate,
    tau: Optional[np.ndarray] = None,
    layer: str = "W",
) -> None:
    """τ_M <- β1 τ_M + (1 - β1) κ τ, then W <- W - η Σ_s (τ_M)_s (u_s ∘ v_s)."""
    tau = _tau(fs, estimate, tau)
    ls = _factor_state(state.layer(layer), fs)
    ls.tau_m = state.beta1 * ls.tau_m + (1.0 - state.beta1) * estimate.kappa * tau
    apply_rank_sum(W, fs.u, fs.v, ls.tau_m, -state.eta)


def step_tezo_adam(
    W: np.ndarray,
    state: OptimizerState,
    fs: FactorSet,
    estimate: ZoEstimate,
    tau: Optional[np.ndarray] = None,
    layer: str = "W",
) -> None:
    """Adam with a separable second moment.

    τ_V <- β2 τ_V + (1 - β2) κ² τ², V_t = Σ_s (τ_V)_s (u_s² ∘ v_s²) and
    W <- W - η M_t / √(V_t + ε), expanded in row blocks.
    """
    tau = _tau(fs, estimate, tau)
    ls = _factor_state(state.layer(layer), fs)
    if ls.tau_v is None:
        ls.tau_v = np.zeros(fs.r)
    g = estimate.kappa * tau
    ls.tau_m = state.beta1 * ls.tau_m + (1.0 - state.beta1) * g
    ls.tau_v = state.beta2 * ls.tau_v + (1.0 - state.beta2) * (g * g)
    u2 = fs.u * fs.u
    v2 = fs.v * fs.v
    um = fs.u * ls.tau_m
    uv = u2 * ls.tau_v
    for start in range(0, W.shape[0], ROW_BLOCK):
        stop = start + ROW_BLOCK
        M = um[start:stop] @ fs.v.T
        V = uv[start:stop] @ v2.T
        W[start:stop] -= state.eta * M / np.sqrt(V + state.eps)


def step_mezo_family(
    W: np.ndarray,
    state: OptimizerState,
    estimate: ZoEstimate,
    z: Optional[np.ndarray] = None,
    layer: str = "W",
) -> None:
    """Dense SGD, momentum or Adam on G = κ z.

    z defaults to the dense draw of the estimate's seed for a single-parameter
    model. G is formed the same way for every variant, so momentum with
    β1 = 0 reproduces SGD bitwise.
    """
    if z is None:
        z = GaussianStream(estimate.seed).normal(*W.shape)
    G = estimate.kappa * z.reshape(W.shape)
    if state.variant == OptimizerVariant.sgd:
        W -= state.eta * G
        return
    ls = state.layer(layer)
    if ls.m is None:
        ls.m = np.zeros_like(W)
    ls.m = state.beta1 * ls.m + (1.0 - state.beta1) * G
    if state.variant == OptimizerVariant.momentum:
        W -= state.eta * ls.m
        return
    if ls.v is None:
        ls.v = np.zeros_like(W)
    ls.v = state.beta2 * ls.v + (1.0 - state.beta2) * (G * G)
    W -= state.eta * ls.m / np.sqrt(ls.v + state.eps)


_optimizers: Dict[str, Tuple[PerturbationMethod, OptimizerVariant]] = dict()


def register_optimizer(
    name: str, method: PerturbationMethod, variant: OptimizerVariant
) -> None:
    _optimizers[name] = (method, variant)


def lookup_optimizer(name: str) -> Tuple[PerturbationMethod, OptimizerVariant]:
    """Resolve an optimizer name such as tezo-adam.

    Raises:
      UnexpectedTypeError: If the name is not registered.
    """
    key = name.strip().lower()
    if key not in _optimizers:
        raise UnexpectedTypeError(name, list(_optimizers))
    return _optimizers[key]


for _method in (PerturbationMethod.tezo, PerturbationMethod.mezo):
    register_optimizer(str(_method), _method, OptimizerVariant.sgd)
    register_optimizer(f"{_method}-m", _method, OptimizerVariant.momentum)
    register_optimizer(f"{_method}-adam", _method, OptimizerVariant.adam)
register_optimizer("lozo", PerturbationMethod.lozo, OptimizerVariant.sgd)
register_optimizer("subzo", PerturbationMethod.subzo, OptimizerVariant.sgd)


class ZOOptimizer:
    """Applies one update rule to every parameter of a model.

    Args:
      model (ModelParams): The parameters, updated in place.
      perturbations (dict): Perturbation kind per parameter name.
      state (OptimizerState): Hyperparameters and buffers.
      unbiased (bool): Scale κ by 1/r_l on low-rank parameters.
    """
    def __init__(
        self,
        model: ModelParams,
        perturbations: Dict[str, Perturbation],
        state: OptimizerState,
        unbiased: bool = False,
    ):
        for pert in perturbations.values():
            if pert.method in (PerturbationMethod.lozo, PerturbationMethod.subzo) \
                    and state.variant != OptimizerVariant.sgd:
                raise ConfigError(
                    "optimizer", f"{pert.method} supports plain updates only"
                )
        self.model = model
        self.perturbations = perturbations
        self.state = state
        self.unbiased = unbiased

    def estimate(
        self, objective: Any, batch: Any, seed: int, t: int
    ) -> ZoEstimate:
        return spsa_kappa(
            objective, self.model, self.perturbations, self.state.rho,
            seed, batch, t,
        )

    def update(self, estimate: ZoEstimate) -> None:
        """Regenerate Z_t from the estimate's seed and apply the update."""
        draws = replay_draws(
            self.model, self.perturbations, estimate.seed, estimate.t
        )
        variant = self.state.variant
        for p in self.model:
            pert = self.perturbations[p.name]
            draw = draws[p.name]
            est = estimate
            if self.unbiased and pert.rank is not None:
                est = replace(estimate, kappa=estimate.kappa / pert.rank)
            if pert.method == PerturbationMethod.tezo:
                if variant == OptimizerVariant.sgd:
                    step_tezo(p.value, self.state, draw.factors, est, draw.coeffs)
                elif variant == OptimizerVariant.momentum:
                    step_tezo_m(
                        p.value, self.state, draw.factors, est, draw.coeffs,
                        layer=p.name,
                    )
                else:
                    step_tezo_adam(
                        p.value, self.state, draw.factors, est, draw.coeffs,
                        layer=p.name,
                    )
            elif pert.method == PerturbationMethod.mezo:
                step_mezo_family(
                    p.value, self.state, est, draw.coeffs, layer=p.name
                )
            else:
                pert.apply(p.value, draw, -self.state.eta * est.kappa)
        self.state.step += 1

    def step(self, objective: Any, batch: Any, seed: int, t: int) -> ZoEstimate:
        estimate = self.estimate(objective, batch, seed, t)
        self.update(estimate)
        return estimate


def resolve_ranks(model: ModelParams, config: RunConfig) -> Dict[str, int]:
    """Fixed rank for every 2-D parameter, or ranks from the weight spectra.

    Raises:
      ConfigError: If a fixed rank exceeds min(m, n) of some layer.
    """
    if config.rank_auto:
        policy = RankPolicy.from_config(config, model)
        return select_ranks(model, policy)
    ranks = dict()
    for p in model.matrices():
        limit = min(p.value.shape)
        if config.rank > limit:
            raise ConfigError(
                "rank", f"{config.rank} exceeds min(m, n) = {limit} of {p.name}"
            )
        ranks[p.name] = config.rank
    return ranks


def run(objective: Any, model: ModelParams, config: RunConfig) -> RunReport:
    """Train model on objective for config.steps iterations.

    Iteration t uses ζ_t = derive(seed, t) for the perturbation and a batch
    drawn from the batch substream. The loss on the objective's reporting
    batch is recorded at step 0, every log_every steps and at the end.
    """
    method, variant = lookup_optimizer(config.optimizer)
    ranks = resolve_ranks(model, config)
    perturbations = build_perturbations(
        model, method, ranks, config.seed,
        lazy_interval=config.lazy_interval,
        factor_refresh=config.factor_refresh,
    )
    state = OptimizerState(
        variant=variant, eta=config.eta, rho=config.rho,
        beta1=config.beta1, beta2=config.beta2, eps=config.eps,
    )
    opt = ZOOptimizer(model, perturbations, state, config.unbiased_scale)
    schedule = SeedSchedule(config.seed)
    batches = schedule.substream(BATCH_STREAM)
    eval_batch = objective.full_batch()

    columns = ["step", "loss", "elements_generated", "state_floats"]
    if config.record_wall_time:
        columns.append("wall_ms")
    rows: List[tuple] = []
    elements = sum(pert.initial_elements() for pert in perturbations.values())
    started = time.perf_counter()

    def record(t: int, loss: float) -> None:
        row = (t, loss, elements, state.state_floats())
        if config.record_wall_time:
            row += ((time.perf_counter() - started) * 1000.0,)
        rows.append(row)

    initial = float(objective.eval(model, eval_batch))
    record(0, initial)
    logger.info(
        "training %s on %s for %d steps, seed %d, initial loss %.6g",
        config.optimizer, config.objective, config.steps, config.seed, initial,
    )
    status = RunStatus.completed
    skipped = 0
    limit = config.divergence_factor * abs(initial) if initial else math.inf
    for t in range(config.steps):
        for pert in perturbations.values():
            elements += pert.step_elements(t)
        batch = objective.sample_batch(batches.derive(t))
        try:
            estimate = opt.step(objective, batch, schedule.derive(t), t)
        except NonFiniteLossError as e:
            skipped += 1
            logger.debug("skipped step %d: %s", t, e)
            continue
        done = t + 1
        if max(estimate.f_plus, estimate.f_minus) > limit:
            record(done, float(objective.eval(model, eval_batch)))
            status = RunStatus.diverged
            logger.warning("diverged at step %d, loss above %.3g", done, limit)
            break
        if done % config.log_every == 0 or done == config.steps:
            loss = float(objective.eval(model, eval_batch))
            record(done, loss)
            logger.debug("step %d loss %.6g", done, loss)
            if not math.isfinite(loss) or loss > limit:
                status = RunStatus.diverged
                logger.warning("diverged at step %d, loss %.6g", done, loss)
                break
            if config.target_ratio is not None and \
                    loss <= config.target_ratio * initial:
                status = RunStatus.converged
                logger.info("reached target at step %d, loss %.6g", done, loss)
                break
    if rows[-1][0] != config.steps and status == RunStatus.completed \
            and config.steps > 0:
        record(config.steps, float(objective.eval(model, eval_batch)))

    floats = state.state_floats()
    totals = {
        "elements_generated": elements,
        "state_floats": floats,
        "expected_state_floats": expected_state_floats(variant, perturbations),
        "skipped_steps": skipped,
        "final_loss": rows[-1][1],
        "steps_run": rows[-1][0],
    }
    if config.record_wall_time:
        totals["wall_ms"] = (time.perf_counter() - started) * 1000.0
    logger.info(
        "finished with status %s after %d steps, loss %.6g, %d skipped",
        status, rows[-1][0], rows[-1][1], skipped,
    )
    return RunReport(
        header=config.as_dict(), columns=columns, rows=rows,
        totals=totals, status=status,
    )


def run_config(config: RunConfig) -> RunReport:
    """Build the configured objective and train it."""
    objective, model = build_objective(config.objective, config.seed)
    return run(objective, model, config)


def sweep_seeds(seed: int, count: int) -> List[int]:
    schedule = SeedSchedule(seed).substream(SWEEP_STREAM)
    return [schedule.derive(i) for i in range(count)]


def run_sweep(config: RunConfig, count: int, jobs: int = 1) -> List[RunReport]:
    """Independent runs of config with derived seeds.

    With jobs > 1 the runs execute in worker processes; each run builds its
    own objective and model, so nothing mutable is shared.
    """
    configs = [replace(config, seed=s) for s in sweep_seeds(config.seed, count)]
    if jobs <= 1:
        return [run_config(c) for c in configs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(run_config, configs))
