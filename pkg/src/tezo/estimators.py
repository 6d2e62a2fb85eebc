# SPDX-License-Identifier: LGPL-3.0-or-later

"""
This module implements the zeroth-order gradient estimators.

Every parameter of a model owns a perturbation kind. One iteration stream,
reset from the seed ζ_t, is consumed by the kinds in declaration order, so
the same Z can be regenerated for the +ρ, -2ρ, +ρ passes and for the update.
"""

from .common import (
    PerturbationMethod,
    NonFiniteLossError,
    ShapeMismatchError,
)
from .lowrank import (
    FactorSet,
    LayerShape,
    apply_rank_sum,
    init_factors,
    perturb_in_place,
)
from .params import ModelParams
from .rng import GaussianStream, SeedSchedule
from dataclasses import dataclass, field
from typing import (
    Any, ClassVar, Dict, Optional, Protocol, Tuple, Type,
)
import logging
import math

import numpy as np

logger = logging.getLogger(__name__)

FACTOR_STREAM = 2
LAZY_STREAM = 4
DEFAULT_LOZO_INTERVAL = 100
DEFAULT_SUBZO_INTERVAL = 500


class ZOObjective(Protocol):
    """The part of an objective a zeroth-order path may use."""
    def eval(self, model: ModelParams, batch: Any) -> float:
        ...


@dataclass
class Draw:
    """The per-iteration variables of one parameter.

    Attributes:
      coeffs (np.ndarray): τ for the low-rank kinds, the flat z for dense.
      left (np.ndarray): m x r left factor, None for dense.
      right (np.ndarray): n x r right factor, None for dense.
      factors (FactorSet): The fixed TeZO factors, None otherwise.
    """
    coeffs: np.ndarray
    left: Optional[np.ndarray] = None
    right: Optional[np.ndarray] = None
    factors: Optional[FactorSet] = None


@dataclass
class ZoEstimate:
    """Projected coefficient of one iteration.

    Attributes:
      kappa (float): κ_t = (f+ - f-) / 2ρ.
      seed (int): The seed ζ_t that regenerates Z.
      rho (float): The perturbation rate.
      t (int): The iteration the estimate belongs to.
      f_plus (float): f(W + ρZ).
      f_minus (float): f(W - ρZ).
    """
    kappa: float
    seed: int
    rho: float
    t: int = 0
    f_plus: float = math.nan
    f_minus: float = math.nan


@dataclass(eq=False)
class Perturbation:
    """Base class for perturbation kinds

    Attributes:
      name (str): The parameter name.
      shape (tuple): The parameter shape.
    """
    method: ClassVar[PerturbationMethod] = PerturbationMethod.mezo
    name: str
    shape: Tuple[int, ...]

    @property
    def rank(self) -> Optional[int]:
        return None

    def draw(self, stream: GaussianStream, t: int) -> Draw:
        raise NotImplementedError

    def apply(self, W: np.ndarray, draw: Draw, scale: float) -> None:
        if draw.left is None:
            if scale != 0.0:
                W += scale * draw.coeffs.reshape(W.shape)
            return
        apply_rank_sum(W, draw.left, draw.right, draw.coeffs, scale)

    def perturb(
        self, W: np.ndarray, stream: GaussianStream, t: int, scale: float
    ) -> Draw:
        """Draw this iteration's variables and apply W += scale * Z."""
        if W.shape != tuple(self.shape):
            raise ShapeMismatchError(W.shape, self.shape)
        draw = self.draw(stream, t)
        self.apply(W, draw, scale)
        return draw

    def materialize(self, draw: Draw) -> np.ndarray:
        if draw.left is None:
            return draw.coeffs.reshape(self.shape).copy()
        return (draw.left * draw.coeffs) @ draw.right.T

    def initial_elements(self) -> int:
        return 0

    def step_elements(self, t: int) -> int:
        raise NotImplementedError

    def epoch_changed(self, t: int) -> bool:
        """True when lazily held factors are replaced at iteration t."""
        return False


_perturbation_handlers: Dict[PerturbationMethod, Type[Perturbation]] = dict()


def register_perturbation_handler(
    method: PerturbationMethod, handler: Type[Perturbation]
) -> None:
    _perturbation_handlers[method] = handler


def lookup_perturbation_handler(
    method: PerturbationMethod
) -> Type[Perturbation]:
    return _perturbation_handlers[method]


@dataclass(eq=False)
class DensePerturbation(Perturbation):
    method: ClassVar[PerturbationMethod] = PerturbationMethod.mezo

    def draw(self, stream: GaussianStream, t: int) -> Draw:
        return Draw(coeffs=stream.sample(int(np.prod(self.shape))))

    def step_elements(self, t: int) -> int:
        return int(np.prod(self.shape))


register_perturbation_handler(PerturbationMethod.mezo, DensePerturbation)


@dataclass(eq=False)
class _LazyFactors(Perturbation):
    r: int = 1
    interval: int = 1
    lazy_seeds: Optional[SeedSchedule] = None
    _epoch: int = field(default=-1, init=False, repr=False)
    _cache: Tuple[np.ndarray, ...] = field(default=(), init=False, repr=False)

    def __post_init__(self):
        LayerShape(self.shape[0], self.shape[1], self.r)
        if self.interval < 1:
            raise ValueError(f"lazy interval {self.interval} must be positive")
        if self.lazy_seeds is None:
            self.lazy_seeds = SeedSchedule(0)

    @property
    def rank(self) -> Optional[int]:
        return self.r

    def epoch_changed(self, t: int) -> bool:
        return t % self.interval == 0

    def _lazy(self, t: int, *shapes: Tuple[int, int]) -> Tuple[np.ndarray, ...]:
        epoch = t // self.interval
        if epoch != self._epoch:
            stream = GaussianStream(self.lazy_seeds.derive(epoch))
            self._cache = tuple(stream.normal(*s) for s in shapes)
            self._epoch = epoch
        return self._cache


@dataclass(eq=False)
class LOZOPerturbation(_LazyFactors):
    """Z = U V^T, U drawn every step, V held for interval steps."""
    method: ClassVar[PerturbationMethod] = PerturbationMethod.lozo

    def draw(self, stream: GaussianStream, t: int) -> Draw:
        m, n = self.shape
        (V,) = self._lazy(t, (n, self.r))
        U = stream.normal(m, self.r)
        return Draw(coeffs=np.ones(self.r), left=U, right=V)

    def step_elements(self, t: int) -> int:
        m, n = self.shape
        lazy = n * self.r if self.epoch_changed(t) else 0
        return m * self.r + lazy


register_perturbation_handler(PerturbationMethod.lozo, LOZOPerturbation)


@dataclass(eq=False)
class SubZOPerturbation(_LazyFactors):
    """Z = U Σ V^T, Σ (r x r) drawn every step, U and V held."""
    method: ClassVar[PerturbationMethod] = PerturbationMethod.subzo

    def draw(self, stream: GaussianStream, t: int) -> Draw:
        m, n = self.shape
        U, V = self._lazy(t, (m, self.r), (n, self.r))
        sigma = stream.normal(self.r, self.r)
        return Draw(coeffs=np.ones(self.r), left=U @ sigma, right=V)

    def step_elements(self, t: int) -> int:
        m, n = self.shape
        lazy = (m + n) * self.r if self.epoch_changed(t) else 0
        return self.r * self.r + lazy


register_perturbation_handler(PerturbationMethod.subzo, SubZOPerturbation)


@dataclass(eq=False)
class TeZOPerturbation(Perturbation):
    """Z = Σ_s τ_s (u_s ∘ v_s) with u, v fixed per layer.

    Attributes:
      r (int): The layer rank r_l.
      factor_seeds (SeedSchedule): Seeds of the factor sets, one per epoch.
      refresh (int): Redraw u, v every refresh steps; None keeps them
        for the whole run.
    """
    method: ClassVar[PerturbationMethod] = PerturbationMethod.tezo
    r: int = 1
    factor_seeds: Optional[SeedSchedule] = None
    refresh: Optional[int] = None
    factors: Optional[FactorSet] = None
    _epoch: int = field(default=0, init=False, repr=False)

    def __post_init__(self):
        if self.refresh is not None and self.refresh < 1:
            raise ValueError(f"refresh interval {self.refresh} must be positive")
        if self.factor_seeds is None:
            self.factor_seeds = SeedSchedule(0)
        if self.factors is None:
            shape = LayerShape(self.shape[0], self.shape[1], self.r)
            self.factors = init_factors(
                shape, self.factor_seeds.derive(0), layer_id=self.name
            )
        elif self.factors.shape != tuple(self.shape):
            raise ShapeMismatchError(self.factors.shape, self.shape)
        self.r = self.factors.r

    @property
    def rank(self) -> Optional[int]:
        return self.r

    def epoch_changed(self, t: int) -> bool:
        return self.refresh is not None and t > 0 and t % self.refresh == 0

    def factors_at(self, t: int) -> FactorSet:
        epoch = 0 if self.refresh is None else t // self.refresh
        if epoch != self._epoch:
            shape = LayerShape(self.shape[0], self.shape[1], self.r)
            self.factors = init_factors(
                shape, self.factor_seeds.derive(epoch), layer_id=self.name
            )
            self._epoch = epoch
        return self.factors

    def draw(self, stream: GaussianStream, t: int) -> Draw:
        fs = self.factors_at(t)
        tau = stream.sample(fs.r)
        return Draw(coeffs=tau, left=fs.u, right=fs.v, factors=fs)

    def perturb(
        self, W: np.ndarray, stream: GaussianStream, t: int, scale: float
    ) -> Draw:
        fs = self.factors_at(t)
        tau = perturb_in_place(W, fs, scale, stream)
        return Draw(coeffs=tau, left=fs.u, right=fs.v, factors=fs)

    def initial_elements(self) -> int:
        m, n = self.shape
        return (m + n) * self.r

    def step_elements(self, t: int) -> int:
        m, n = self.shape
        lazy = (m + n) * self.r if self.epoch_changed(t) else 0
        return self.r + lazy


register_perturbation_handler(PerturbationMethod.tezo, TeZOPerturbation)


def build_perturbations(
    model: ModelParams,
    method: PerturbationMethod,
    ranks: Dict[str, int],
    seed: int,
    lazy_interval: Optional[int] = None,
    factor_refresh: Optional[int] = None,
) -> Dict[str, Perturbation]:
    """Assign a perturbation kind to every parameter.

    1-D parameters always get dense Gaussian perturbations. Seeds for the
    factor sets of layer i come from the i-th substream of the run seed.
    """
    run = SeedSchedule(seed)
    out: Dict[str, Perturbation] = dict()
    for index, p in enumerate(model):
        shape = tuple(p.value.shape)
        if not p.is_matrix or method == PerturbationMethod.mezo:
            out[p.name] = DensePerturbation(name=p.name, shape=shape)
            continue
        cls = lookup_perturbation_handler(method)
        if method == PerturbationMethod.tezo:
            out[p.name] = cls(
                name=p.name,
                shape=shape,
                r=ranks[p.name],
                factor_seeds=run.substream(FACTOR_STREAM).substream(index),
                refresh=factor_refresh,
            )
        else:
            interval = lazy_interval
            if interval is None:
                interval = (
                    DEFAULT_LOZO_INTERVAL
                    if method == PerturbationMethod.lozo
                    else DEFAULT_SUBZO_INTERVAL
                )
            out[p.name] = cls(
                name=p.name,
                shape=shape,
                r=ranks[p.name],
                interval=interval,
                lazy_seeds=run.substream(LAZY_STREAM).substream(index),
            )
    return out


def apply_perturbation(
    model: ModelParams,
    perturbations: Dict[str, Perturbation],
    scale: float,
    seed: int,
    t: int = 0,
) -> Dict[str, Draw]:
    """Reset the stream to seed and add scale * Z to every parameter in
    declaration order."""
    stream = GaussianStream(seed)
    draws = dict()
    for p in model:
        draws[p.name] = perturbations[p.name].perturb(p.value, stream, t, scale)
    return draws


def replay_draws(
    model: ModelParams,
    perturbations: Dict[str, Perturbation],
    seed: int,
    t: int = 0,
) -> Dict[str, Draw]:
    """Regenerate the draws of seed without touching the parameters."""
    stream = GaussianStream(seed)
    return {p.name: perturbations[p.name].draw(stream, t) for p in model}


def spsa_kappa(
    objective: ZOObjective,
    model: ModelParams,
    perturbations: Dict[str, Perturbation],
    rho: float,
    seed: int,
    batch: Any = None,
    t: int = 0,
) -> ZoEstimate:
    """Two-point SPSA coefficient with in-place perturbations.

    Applies +ρ, -2ρ, +ρ with the same seed on the same batch and returns
    κ = (f+ - f-) / 2ρ. The parameters are restored up to rounding.

    Raises:
      ValueError: If rho is not positive.
      NonFiniteLossError: If f+ or f- is not finite; W is restored first.
      Any exception of objective.eval, also after W is restored.
    """
    if not rho > 0:
        raise ValueError(f"perturbation rate {rho} must be positive")
    # offset of W from its input value
    offset = 0.0
    try:
        apply_perturbation(model, perturbations, rho, seed, t)
        offset = rho
        f_plus = float(objective.eval(model, batch))
        apply_perturbation(model, perturbations, -2.0 * rho, seed, t)
        offset = -rho
        f_minus = float(objective.eval(model, batch))
    finally:
        if offset:
            apply_perturbation(model, perturbations, -offset, seed, t)
    if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
        logger.debug("rejected estimate at t=%d: f+=%r f-=%r", t, f_plus, f_minus)
        raise NonFiniteLossError(f_plus, f_minus)
    kappa = (f_plus - f_minus) / (2.0 * rho)
    return ZoEstimate(
        kappa=kappa, seed=seed, rho=rho, t=t, f_plus=f_plus, f_minus=f_minus
    )


def zo_gradient(
    estimate: ZoEstimate,
    model: ModelParams,
    perturbations: Dict[str, Perturbation],
    unbiased: bool = False,
) -> Dict[str, np.ndarray]:
    """Materialize κ_t Z_t per parameter.

    With unbiased=True low-rank kinds are scaled by 1/r so that the
    expectation over the draws equals the gradient.
    """
    draws = replay_draws(model, perturbations, estimate.seed, estimate.t)
    out = dict()
    for name, draw in draws.items():
        pert = perturbations[name]
        scale = estimate.kappa
        if unbiased and pert.rank is not None:
            scale /= pert.rank
        out[name] = scale * pert.materialize(draw)
    return out


def delta_coefficient(m: int, n: int, r: int) -> float:
    """Variance coefficient δ = 1 + mn + 2mn/r + 6(m+n)/r + 10/r."""
    if min(m, n, r) < 1:
        raise ValueError("m, n and r must be positive")
    return 1 + m * n + (2 * m * n + 6 * (m + n) + 10) / r


def delta_rho_coefficient(m: int, n: int, r: int) -> float:
    """Bias constant δ_ρ = (15r²(m+3)³(n+3)³ + 36r³m³n³ + r⁴m³n³) / 4.

    Evaluated in exact integers and rounded once to float, so only the final
    conversion carries a relative error (at most 2^-53).
    """
    if min(m, n, r) < 1:
        raise ValueError("m, n and r must be positive")
    mn3 = m ** 3 * n ** 3
    numerator = (
        15 * r ** 2 * (m + 3) ** 3 * (n + 3) ** 3
        + 36 * r ** 3 * mn3
        + r ** 4 * mn3
    )
    return numerator / 4


def baseline_perturbation(
    method: PerturbationMethod,
    shape: Tuple[int, int],
    r: int,
    seed: int,
    t: int,
    interval: int = 1,
) -> np.ndarray:
    """The LOZO or SubZO perturbation of iteration t, materialized.

    seed is the run seed; the per-step stream is its t-th derived seed and
    the lazy factors come from the layer-0 lazy substream.
    """
    if method not in (PerturbationMethod.lozo, PerturbationMethod.subzo):
        raise ValueError(f"{method} is not a factorized baseline")
    cls = lookup_perturbation_handler(method)
    pert = cls(
        name="W",
        shape=tuple(shape),
        r=r,
        interval=interval,
        lazy_seeds=SeedSchedule(seed).substream(LAZY_STREAM).substream(0),
    )
    stream = GaussianStream(SeedSchedule(seed).derive(t))
    return pert.materialize(pert.draw(stream, t))

