# SPDX-License-Identifier: LGPL-3.0-or-later

"""
This module implements layer-wise rank selection from weight spectra.

A layer's raw rank is the number of singular values above a fraction of the
largest one. Every layer of a block then receives the smallest raw rank in
that block, capped by r_max.
"""

from .common import RankCriterion, ConfigError
from .params import ModelParams
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

JACOBI_LIMIT = 1024
MAX_SWEEPS = 60


@dataclass(frozen=True)
class RankPolicy:
    """How ranks are chosen.

    Attributes:
      threshold_frac (float): Fraction of σ_1 a singular value must exceed;
        with the energy criterion, the fraction of Σσ² to retain.
      r_max (int): Upper bound on every rank.
      blocks (dict): Block label to the names of its layers. Empty means one
        block per label found on the model.
      criterion (RankCriterion): largest or energy.
      method (str): auto, jacobi or lapack.
    """
    threshold_frac: float = 0.25
    r_max: int = 64
    blocks: Dict[int, Tuple[str, ...]] = field(default_factory=dict)
    criterion: RankCriterion = RankCriterion.largest
    method: str = "auto"

    def __post_init__(self):
        if not 0.0 < self.threshold_frac < 1.0:
            raise ConfigError(
                "threshold", f"{self.threshold_frac} is outside (0, 1)"
            )
        if self.r_max < 1:
            raise ConfigError("r_max", f"{self.r_max} is less than 1")
        if self.method not in ("auto", "jacobi", "lapack"):
            raise ConfigError("method", f"unknown SVD method {self.method}")

    @classmethod
    def from_config(cls, config, model: ModelParams) -> "RankPolicy":
        return cls(
            threshold_frac=config.threshold,
            r_max=config.r_max,
            blocks=model_blocks(model),
            criterion=RankCriterion.from_name(config.criterion),
        )


def model_blocks(model: ModelParams) -> Dict[int, Tuple[str, ...]]:
    """Group the 2-D parameters by their block label, in declaration order."""
    blocks: Dict[int, List[str]] = dict()
    for p in model.matrices():
        blocks.setdefault(p.block, []).append(p.name)
    return {b: tuple(names) for b, names in blocks.items()}


def _round_robin(n: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    # n - 1 rounds of n / 2 disjoint pairs covering every pair once
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        left = np.array(players[:half])
        right = np.array(players[half:][::-1])
        rounds.append((left, right))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi_singular_values(W: np.ndarray) -> np.ndarray:
    """One-sided Jacobi: rotate column pairs until mutually orthogonal."""
    A = np.array(W, dtype=np.float64)
    if A.shape[0] < A.shape[1]:
        A = A.T.copy()
    m, n = A.shape
    if n % 2:
        A = np.hstack([A, np.zeros((m, 1))])
    tol = max(m, 1) * np.finfo(np.float64).eps
    rounds = _round_robin(A.shape[1])
    for _ in range(MAX_SWEEPS):
        rotated = False
        for left, right in rounds:
            ai = A[:, left]
            aj = A[:, right]
            alpha = np.einsum("ij,ij->j", ai, ai)
            beta = np.einsum("ij,ij->j", aj, aj)
            gamma = np.einsum("ij,ij->j", ai, aj)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not active.any():
                continue
            rotated = True
            safe = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * safe)
            sign = np.where(zeta >= 0.0, 1.0, -1.0)
            t = np.where(active, sign / (np.abs(zeta) + np.hypot(1.0, zeta)), 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            A[:, left] = c * ai - s * aj
            A[:, right] = s * ai + c * aj
        if not rotated:
            break
    sigma = np.sqrt(np.einsum("ij,ij->j", A, A))[:n]
    return np.sort(sigma)[::-1]


def singular_values(W: np.ndarray, k: int, method: str = "auto") -> np.ndarray:
    """Top-k singular values of W in descending order.

    Raises:
      ValueError: If k is negative or larger than min(m, n).
    """
    if W.ndim != 2:
        raise ValueError(f"expected a matrix, got {W.ndim} dimensions")
    if not 0 <= k <= min(W.shape):
        raise ValueError(f"k = {k} outside [0, {min(W.shape)}]")
    if k == 0:
        return np.empty(0)
    if method == "auto":
        method = "jacobi" if max(W.shape) <= JACOBI_LIMIT else "lapack"
    if method == "lapack":
        sigma = np.linalg.svd(W, compute_uv=False)
    else:
        sigma = _jacobi_singular_values(W)
    return sigma[:k].copy()


def rank_from_spectrum(sigma: np.ndarray, policy: RankPolicy) -> int:
    if sigma.size == 0 or sigma[0] == 0.0:
        return 1
    if policy.criterion == RankCriterion.energy:
        energy = np.cumsum(sigma * sigma)
        reached = energy >= policy.threshold_frac * energy[-1]
        return int(np.argmax(reached)) + 1
    return max(1, int(np.count_nonzero(sigma > policy.threshold_frac * sigma[0])))


def matrix_rank(W: np.ndarray, policy: RankPolicy) -> int:
    """Effective rank of W under policy; a zero matrix has rank 1."""
    return rank_from_spectrum(
        singular_values(W, min(W.shape), policy.method), policy
    )


def _blocks(model: ModelParams, policy: RankPolicy) -> Dict[int, Tuple[str, ...]]:
    blocks = policy.blocks or model_blocks(model)
    matrices = {p.name for p in model.matrices()}
    seen = set()
    for label, names in blocks.items():
        if not names:
            raise ConfigError("blocks", f"block {label} is empty")
        for name in names:
            if name not in matrices:
                raise ConfigError("blocks", f"{name} is not a 2-D layer")
            if name in seen:
                raise ConfigError("blocks", f"{name} is in more than one block")
            seen.add(name)
    missing = matrices - seen
    if missing:
        raise ConfigError("blocks", f"layers {sorted(missing)} have no block")
    return blocks


def rank_table(
    model: ModelParams, policy: RankPolicy
) -> List[Tuple[str, float, int, int]]:
    """Rows of (layer, sigma1, rank_raw, rank_selected) in declaration order.

    Raises:
      ConfigError: If a block is empty, a layer is in two blocks or the
        blocks miss a 2-D layer.
    """
    blocks = _blocks(model, policy)
    raw: Dict[str, int] = dict()
    sigma1: Dict[str, float] = dict()
    for p in model.matrices():
        sigma = singular_values(p.value, min(p.value.shape), policy.method)
        sigma1[p.name] = float(sigma[0])
        raw[p.name] = rank_from_spectrum(sigma, policy)
    selected: Dict[str, int] = dict()
    for names in blocks.values():
        bound = min(min(raw[n] for n in names), policy.r_max)
        for name in names:
            selected[name] = bound
    return [
        (p.name, sigma1[p.name], raw[p.name], selected[p.name])
        for p in model.matrices()
    ]


def select_ranks(model: ModelParams, policy: RankPolicy) -> Dict[str, int]:
    """r_l = min(min of raw ranks in the block of l, r_max)."""
    return {row[0]: row[3] for row in rank_table(model, policy)}
