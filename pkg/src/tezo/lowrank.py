# SPDX-License-Identifier: LGPL-3.0-or-later

"""
This module implements factor sets, CPD perturbations and the
element-generation accounting of the zeroth-order perturbation schemes.

A 2-D weight W (m x n) is perturbed by Z = Σ_s τ_s (u_s ∘ v_s) where the
factor vectors u_s, v_s are drawn once per layer and only the r temporal
coefficients τ are drawn per iteration.
"""

from .common import (
    PerturbationMethod,
    ShapeMismatchError,
    CountOverflowError,
)
from .rng import GaussianStream
from dataclasses import dataclass
from typing import Union

import numpy as np

INT64_MAX = 2 ** 63 - 1
# rows per fused pass when applying a rank-r sum to W
ROW_BLOCK = 256


@dataclass(frozen=True)
class LayerShape:
    """Shape and rank of a 2-D layer.

    Attributes:
      m (int): Rows.
      n (int): Columns.
      r (int): Rank of the perturbation.
      block (int): Index of the block the layer belongs to.
    """
    m: int
    n: int
    r: int
    block: int = 0

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ValueError(f"layer shape ({self.m}, {self.n}) is empty")
        if not 1 <= self.r <= min(self.m, self.n):
            raise ValueError(
                f"rank {self.r} outside [1, {min(self.m, self.n)}]"
            )


@dataclass(frozen=True, eq=False)
class FactorSet:
    """Fixed Gaussian factors of one layer.

    Attributes:
      u (np.ndarray): m x r matrix, column s is u_s.
      v (np.ndarray): n x r matrix, column s is v_s.
      layer_id (str): The layer name.
      seed (int): The seed the factors were drawn from.
    """
    u: np.ndarray
    v: np.ndarray
    layer_id: str = ""
    seed: int = 0

    def __post_init__(self):
        if self.u.ndim != 2 or self.v.ndim != 2:
            raise ShapeMismatchError(self.u.shape + self.v.shape, (0, 0))
        if self.u.shape[1] != self.v.shape[1]:
            raise ShapeMismatchError(
                self.v.shape, (self.v.shape[0], self.u.shape[1])
            )
        self.u.setflags(write=False)
        self.v.setflags(write=False)

    @property
    def m(self) -> int:
        return self.u.shape[0]

    @property
    def n(self) -> int:
        return self.v.shape[0]

    @property
    def r(self) -> int:
        return self.u.shape[1]

    @property
    def shape(self):
        return (self.m, self.n)


@dataclass(frozen=True)
class CostModel:
    method: PerturbationMethod
    m: int
    n: int
    r: int
    T: int


def init_factors(
    shape: LayerShape, seed: int, layer_id: str = ""
) -> FactorSet:
    """Draw u then v from GaussianStream(seed).

    u is filled row-major (m x r) before v (n x r), so the set is regenerable
    from the recorded seed alone.
    """
    stream = GaussianStream(seed)
    u = stream.normal(shape.m, shape.r)
    v = stream.normal(shape.n, shape.r)
    return FactorSet(u=u, v=v, layer_id=layer_id, seed=seed)


def _check_tau(fs: FactorSet, tau: np.ndarray) -> np.ndarray:
    tau = np.asarray(tau, dtype=np.float64)
    if tau.shape != (fs.r,):
        raise ShapeMismatchError(tau.shape, (fs.r,))
    return tau


def materialize_perturbation(fs: FactorSet, tau: np.ndarray) -> np.ndarray:
    """Returns Z = Σ_s τ_s outer(u_s, v_s) as a dense m x n matrix.

    Raises:
      ShapeMismatchError: If len(tau) != r.
    """
    tau = _check_tau(fs, tau)
    return (fs.u * tau) @ fs.v.T


def apply_rank_sum(
    W: np.ndarray, u: np.ndarray, v: np.ndarray, coeffs: np.ndarray,
    scale: float,
) -> None:
    """W += scale * Σ_s coeffs_s outer(u_s, v_s), in row blocks."""
    if W.shape != (u.shape[0], v.shape[0]):
        raise ShapeMismatchError(W.shape, (u.shape[0], v.shape[0]))
    if scale == 0.0:
        return
    weighted = u * (scale * coeffs)
    for start in range(0, W.shape[0], ROW_BLOCK):
        stop = start + ROW_BLOCK
        W[start:stop] += weighted[start:stop] @ v.T


def expand_separable(fs: FactorSet, coeffs: np.ndarray) -> np.ndarray:
    """Returns Σ_s coeffs_s (u_s² ∘ v_s²) as a dense m x n matrix."""
    coeffs = _check_tau(fs, coeffs)
    return (fs.u * fs.u * coeffs) @ (fs.v * fs.v).T


def perturb_in_place(
    W: np.ndarray,
    fs: FactorSet,
    scale: float,
    seed: Union[int, GaussianStream],
) -> np.ndarray:
    """W <- W + scale * Z with Z resampled from seed.

    When seed is a GaussianStream the r coefficients are drawn from it at its
    current cursor, so several layers can share one iteration stream. The
    drawn τ is returned. scale = 0 still consumes the draws but leaves W
    untouched.

    Raises:
      ShapeMismatchError: If W is not m x n.
    """
    if W.shape != fs.shape:
        raise ShapeMismatchError(W.shape, fs.shape)
    stream = seed if isinstance(seed, GaussianStream) else GaussianStream(seed)
    tau = stream.sample(fs.r)
    apply_rank_sum(W, fs.u, fs.v, tau, scale)
    return tau


def count_elements(cm: CostModel) -> int:
    """Number of Gaussian elements generated over T iterations.

    Raises:
      ValueError: If any field is not positive.
      CountOverflowError: If the count does not fit a signed 64-bit int.
    """
    for name in ("m", "n", "r", "T"):
        if getattr(cm, name) < 1:
            raise ValueError(f"{name} must be positive")
    m, n, r, T = cm.m, cm.n, cm.r, cm.T
    if cm.method == PerturbationMethod.mezo:
        count = m * n * T
    elif cm.method == PerturbationMethod.subzo:
        count = (m + n + r) * r * T
    elif cm.method == PerturbationMethod.lozo:
        count = (m + n) * r * T
    elif cm.method == PerturbationMethod.tezo:
        count = (m + n + T) * r
    if count > INT64_MAX:
        raise CountOverflowError(str(cm.method), count)
    return count
