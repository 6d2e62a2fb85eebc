# SPDX-License-Identifier: LGPL-3.0-or-later

"""
This module implements the test objectives and their exact gradient oracles.

Zeroth-order code only ever calls eval; exact_grad exists for verification
and diagnostics.
"""

from .common import (
    Activation,
    ShapeMismatchError,
    UnexpectedTypeError,
)
from .params import ModelParams, Parameter
from .rank_select import RankPolicy, matrix_rank, singular_values
from .rng import SeedSchedule, make_generator
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple
import logging
import math
import re

import numpy as np

logger = logging.getLogger(__name__)

OBJECTIVE_STREAM = 5
DEFAULT_SAMPLES = 256
DEFAULT_BATCH = 32


@dataclass(frozen=True, eq=False)
class Batch:
    """A fixed minibatch.

    Attributes:
      x (np.ndarray): Inputs, one column per sample (d_in x B).
      y (np.ndarray): Integer class labels, length B.
    """
    x: np.ndarray
    y: np.ndarray

    @property
    def size(self) -> int:
        return self.y.size


def quad_eval(W: np.ndarray, A: np.ndarray, b: np.ndarray) -> float:
    """f = ½⟨w, Aw⟩ - ⟨b, w⟩ over the flattened w.

    Raises:
      ShapeMismatchError: If A is not d x d or b is not length d.
    """
    w = W.reshape(-1)
    d = w.size
    if A.shape != (d, d):
        raise ShapeMismatchError(A.shape, (d, d))
    if b.shape != (d,):
        raise ShapeMismatchError(b.shape, (d,))
    return float(0.5 * (w @ (A @ w)) - b @ w)


def _unflatten(model: ModelParams, flat: np.ndarray) -> Dict[str, np.ndarray]:
    out = dict()
    offset = 0
    for p in model:
        out[p.name] = flat[offset:offset + p.value.size].reshape(p.value.shape)
        offset += p.value.size
    return out


@dataclass(eq=False)
class QuadraticObjective:
    """f(w) = ½⟨w, Aw⟩ - ⟨b, w⟩ over all parameters flattened."""
    A: np.ndarray
    b: np.ndarray
    smooth: bool = True

    def eval(self, model: ModelParams, batch: Any = None) -> float:
        return quad_eval(model.flatten(), self.A, self.b)

    def exact_grad(
        self, model: ModelParams, batch: Any = None
    ) -> Dict[str, np.ndarray]:
        w = model.flatten()
        return _unflatten(model, self.A @ w - self.b)

    def sample_batch(self, seed: int) -> Any:
        return None

    def full_batch(self) -> Any:
        return None

    def minimizer(self) -> np.ndarray:
        return np.linalg.solve(self.A, self.b)


@dataclass(eq=False)
class CubicObjective(QuadraticObjective):
    """A quadratic plus (c/6) Σ w_i³, so the SPSA remainder is nonzero."""
    c: float = 1.0

    def eval(self, model: ModelParams, batch: Any = None) -> float:
        w = model.flatten()
        cubic = self.c / 6.0 * np.sum(w * w * w)
        return quad_eval(w, self.A, self.b) + float(cubic)

    def exact_grad(
        self, model: ModelParams, batch: Any = None
    ) -> Dict[str, np.ndarray]:
        w = model.flatten()
        return _unflatten(model, self.A @ w - self.b + 0.5 * self.c * w * w)


def spd_matrix(
    d: int, seed: int, low: float = 1.0, high: float = 2.0
) -> np.ndarray:
    """Symmetric positive definite d x d matrix with eigenvalues evenly
    spaced in [low, high] and a random orthogonal basis."""
    rng = make_generator(seed)
    Q, R = np.linalg.qr(rng.standard_normal((d, d)))
    Q = Q * np.sign(np.diag(R))
    eig = np.linspace(low, high, d)
    A = (Q * eig) @ Q.T
    return 0.5 * (A + A.T)


def _act(kind: Activation, a: np.ndarray) -> np.ndarray:
    if kind == Activation.tanh:
        return np.tanh(a)
    if kind == Activation.relu:
        return np.maximum(a, 0.0)
    return a


def _act_grad(kind: Activation, a: np.ndarray, out: np.ndarray) -> np.ndarray:
    if kind == Activation.tanh:
        return 1.0 - out * out
    if kind == Activation.relu:
        return (a > 0.0).astype(np.float64)
    return np.ones_like(a)


@dataclass(eq=False)
class CascadeMLP:
    """Cascade network X_l = σ_l(W_l X_{l-1} + b_l).

    The last layer has no activation; its outputs are softmax logits.

    Attributes:
      sizes (tuple): Widths d_0, d_1, ..., d_L.
      activation (Activation): σ of the hidden layers.
      block_size (int): Consecutive layers sharing a rank block.
    """
    sizes: Tuple[int, ...]
    activation: Activation = Activation.tanh
    block_size: int = 2

    def __post_init__(self):
        if len(self.sizes) < 2 or min(self.sizes) < 1:
            raise ValueError(f"invalid layer sizes {self.sizes}")
        if self.block_size < 1:
            raise ValueError(f"block size {self.block_size} must be positive")

    @property
    def depth(self) -> int:
        return len(self.sizes) - 1

    @property
    def smooth(self) -> bool:
        return self.activation != Activation.relu

    def init_params(self, seed: int, scale: Optional[float] = None) -> ModelParams:
        """Gaussian weights scaled by 1/√fan_in and zero biases."""
        rng = make_generator(seed)
        params = []
        for l in range(self.depth):
            fan_in, fan_out = self.sizes[l], self.sizes[l + 1]
            s = scale if scale is not None else 1.0 / math.sqrt(fan_in)
            params.append(Parameter(
                name=f"W{l + 1}",
                value=s * rng.standard_normal((fan_out, fan_in)),
                block=l // self.block_size,
            ))
            params.append(Parameter(
                name=f"b{l + 1}",
                value=np.zeros(fan_out),
                block=l // self.block_size,
            ))
        return ModelParams(params)

    def zero_params(self) -> ModelParams:
        return self.init_params(0, scale=0.0)

    def forward(
        self, model: ModelParams, x: np.ndarray
    ) -> Tuple[List[np.ndarray], List[np.ndarray]]:
        """Returns the pre-activations A_l and outputs X_l, X_0 = x."""
        if x.shape[0] != self.sizes[0]:
            raise ShapeMismatchError(x.shape, (self.sizes[0], x.shape[1]))
        pre: List[np.ndarray] = []
        outs = [x]
        for l in range(self.depth):
            W = model[f"W{l + 1}"].value
            b = model[f"b{l + 1}"].value
            a = W @ outs[-1] + b[:, None]
            pre.append(a)
            last = l == self.depth - 1
            outs.append(a if last else _act(self.activation, a))
        return pre, outs


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shift = logits.max(axis=0, keepdims=True)
    z = logits - shift
    return z - np.log(np.exp(z).sum(axis=0, keepdims=True))


def mlp_eval(net: CascadeMLP, model: ModelParams, batch: Batch) -> float:
    """Mean softmax cross-entropy of the network on batch.

    Raises:
      FloatingPointError: If an activation is not finite.
    """
    _, outs = net.forward(model, batch.x)
    for l, out in enumerate(outs[1:], start=1):
        if not np.all(np.isfinite(out)):
            raise FloatingPointError(f"non-finite activation in layer {l}")
    logp = _log_softmax(outs[-1])
    return float(-logp[batch.y, np.arange(batch.size)].mean())


def mlp_grad(
    net: CascadeMLP, model: ModelParams, batch: Batch
) -> Dict[str, np.ndarray]:
    """Backpropagation of the mean cross-entropy."""
    pre, outs = net.forward(model, batch.x)
    probs = np.exp(_log_softmax(outs[-1]))
    delta = probs
    delta[batch.y, np.arange(batch.size)] -= 1.0
    delta /= batch.size
    grads: Dict[str, np.ndarray] = dict()
    for l in reversed(range(net.depth)):
        grads[f"W{l + 1}"] = delta @ outs[l].T
        grads[f"b{l + 1}"] = delta.sum(axis=1)
        if l > 0:
            W = model[f"W{l + 1}"].value
            delta = (W.T @ delta) * _act_grad(net.activation, pre[l - 1], outs[l])
    return {p.name: grads[p.name] for p in model}


def cluster_data(
    n_samples: int,
    d_in: int,
    n_classes: int,
    intrinsic_dim: int,
    seed: int,
    separation: float = 3.0,
    noise: float = 0.0,
) -> Batch:
    """Gaussian clusters living in a random intrinsic_dim subspace.

    Labels cycle through the classes so every class is balanced. noise adds
    isotropic ambient noise that leaves the subspace.
    """
    if not 1 <= intrinsic_dim <= d_in:
        raise ValueError(f"intrinsic dimension {intrinsic_dim} outside [1, {d_in}]")
    rng = make_generator(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((d_in, intrinsic_dim)))
    centers = separation * rng.standard_normal((intrinsic_dim, n_classes))
    y = np.arange(n_samples) % n_classes
    coords = centers[:, y] + rng.standard_normal((intrinsic_dim, n_samples))
    x = basis @ coords
    if noise > 0.0:
        x = x + noise * rng.standard_normal((d_in, n_samples))
    return Batch(x=x, y=y)


@dataclass(eq=False)
class MLPObjective:
    """Cross-entropy of a CascadeMLP on a fixed synthetic dataset.

    Attributes:
      net (CascadeMLP): The architecture.
      data (Batch): All samples.
      batch_size (int): Samples per minibatch, 0 for full batch.
    """
    net: CascadeMLP
    data: Batch
    batch_size: int = DEFAULT_BATCH

    @property
    def smooth(self) -> bool:
        return self.net.smooth

    def eval(self, model: ModelParams, batch: Optional[Batch] = None) -> float:
        try:
            return mlp_eval(self.net, model, self.data if batch is None else batch)
        except FloatingPointError as e:
            logger.debug("%s", e)
            return math.nan

    def exact_grad(
        self, model: ModelParams, batch: Optional[Batch] = None
    ) -> Dict[str, np.ndarray]:
        return mlp_grad(self.net, model, self.data if batch is None else batch)

    def sample_batch(self, seed: int) -> Batch:
        n = self.data.size
        if self.batch_size <= 0 or self.batch_size >= n:
            return self.data
        idx = make_generator(seed).choice(n, self.batch_size, replace=False)
        return Batch(x=self.data.x[:, idx], y=self.data.y[idx])

    def full_batch(self) -> Batch:
        return self.data


ObjectiveBuilder = Callable[[re.Match, int], Tuple[Any, ModelParams]]

_objective_builders: List[Tuple[re.Pattern, ObjectiveBuilder, Callable]] = list()


def register_objective(pattern: str, builder: ObjectiveBuilder, shapes: Callable):
    _objective_builders.append((re.compile(pattern), builder, shapes))


def _lookup(spec: str):
    for pattern, builder, shapes in _objective_builders:
        match = pattern.fullmatch(spec.strip().lower())
        if match:
            return match, builder, shapes
    raise UnexpectedTypeError(spec, ["quad<N>", "cubic<N>", "mlp:<sizes>[:relu]"])


def _quad_builder(match: re.Match, seed: int) -> Tuple[Any, ModelParams]:
    n = int(match.group(2))
    d = n * n
    problem = SeedSchedule(seed).substream(OBJECTIVE_STREAM)
    A = spd_matrix(d, problem.derive(0))
    rng = make_generator(problem.derive(1))
    if match.group(1) == "quad":
        W = rng.standard_normal((n, n))
        return QuadraticObjective(A=A, b=np.zeros(d)), ModelParams.single(W)
    W = 0.1 * rng.standard_normal((n, n))
    return CubicObjective(A=A, b=np.zeros(d)), ModelParams.single(W)


def _quad_shapes(match: re.Match) -> List[Tuple[int, ...]]:
    n = int(match.group(2))
    return [(n, n)]


def _mlp_sizes(match: re.Match) -> Tuple[int, ...]:
    return tuple(int(s) for s in match.group(1).split("-"))


def _mlp_builder(match: re.Match, seed: int) -> Tuple[Any, ModelParams]:
    sizes = _mlp_sizes(match)
    activation = Activation.from_name(match.group(2) or "tanh")
    if activation == Activation.relu:
        logger.warning("relu network is not smooth, gradient Lipschitz bounds do not apply")
    net = CascadeMLP(sizes=sizes, activation=activation)
    problem = SeedSchedule(seed).substream(OBJECTIVE_STREAM)
    data = cluster_data(
        DEFAULT_SAMPLES, sizes[0], sizes[-1], min(4, sizes[0]), problem.derive(0)
    )
    model = net.init_params(problem.derive(1))
    return MLPObjective(net=net, data=data), model


def _mlp_shapes(match: re.Match) -> List[Tuple[int, ...]]:
    sizes = _mlp_sizes(match)
    shapes: List[Tuple[int, ...]] = []
    for l in range(len(sizes) - 1):
        shapes += [(sizes[l + 1], sizes[l]), (sizes[l + 1],)]
    return shapes


register_objective(r"(quad|cubic)(\d+)", _quad_builder, _quad_shapes)
register_objective(
    r"mlp:(\d+(?:-\d+)+)(?::(tanh|relu|identity))?", _mlp_builder, _mlp_shapes
)


def build_objective(spec: str, seed: int) -> Tuple[Any, ModelParams]:
    """Build an objective and its initial parameters from a name such as
    quad16, cubic8 or mlp:8-16-2:relu.

    Raises:
      UnexpectedTypeError: If spec matches no registered objective.
    """
    match, builder, _ = _lookup(spec)
    return builder(match, seed)


def objective_shapes(spec: str) -> List[Tuple[int, ...]]:
    """Parameter shapes of spec without building it."""
    match, _, shapes = _lookup(spec)
    return shapes(match)


def finite_difference_grad(
    objective: Any, model: ModelParams, batch: Any = None, h: float = 1e-5
) -> Dict[str, np.ndarray]:
    """Central differences (f(w + h e_i) - f(w - h e_i)) / 2h per entry."""
    out = dict()
    for p in model:
        grad = np.empty_like(p.value)
        flat = p.value.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            f_plus = objective.eval(model, batch)
            flat[i] = saved - h
            f_minus = objective.eval(model, batch)
            flat[i] = saved
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
        out[p.name] = grad
    return out


def _flat_grad(objective: Any, model: ModelParams, batch: Any) -> np.ndarray:
    grads = objective.exact_grad(model, batch)
    return np.concatenate([grads[p.name].reshape(-1) for p in model])


def gradient_lipschitz(
    objective: Any,
    model: ModelParams,
    pairs: int = 32,
    radius: float = 0.1,
    seed: int = 0,
    batch: Any = None,
) -> float:
    """Largest ‖∇f(x) - ∇f(y)‖ / ‖x - y‖ over random pairs in a ball of
    radius around the current parameters. model is left unchanged."""
    rng = make_generator(seed)
    center = model.flatten()
    point = model.copy()
    best = 0.0
    for _ in range(pairs):
        x = center + radius * rng.standard_normal(center.size)
        y = center + radius * rng.standard_normal(center.size)
        point.assign_flat(x)
        gx = _flat_grad(objective, point, batch)
        point.assign_flat(y)
        gy = _flat_grad(objective, point, batch)
        best = max(best, float(np.linalg.norm(gx - gy) / np.linalg.norm(x - y)))
    return best


@dataclass
class SpectrumReport:
    """Gradient low-rankness diagnostics per 2-D layer.

    Attributes:
      spectra (dict): steps x k top singular values of the gradient.
      cosine (dict): steps x steps cosine matrix of the flattened gradients;
        rows and columns of zero gradients are NaN.
      weight_rank (dict): Rank of the final weight under the policy.
      grad_rank (dict): Rank of the final gradient under the policy.
    """
    spectra: Dict[str, np.ndarray] = field(default_factory=dict)
    cosine: Dict[str, np.ndarray] = field(default_factory=dict)
    weight_rank: Dict[str, int] = field(default_factory=dict)
    grad_rank: Dict[str, int] = field(default_factory=dict)

    def mean_off_diagonal(self, name: str) -> float:
        c = self.cosine[name]
        mask = ~np.eye(c.shape[0], dtype=bool)
        values = c[mask]
        values = values[np.isfinite(values)]
        return float(values.mean()) if values.size else math.nan


def cosine_matrix(grads: np.ndarray) -> np.ndarray:
    """G^T G of the column-normalized gradients; zero columns give NaN."""
    norms = np.linalg.norm(grads, axis=0)
    zero = norms == 0.0
    unit = grads / np.where(zero, 1.0, norms)
    cos = unit.T @ unit
    cos[zero, :] = np.nan
    cos[:, zero] = np.nan
    return cos


def gradient_spectrum(
    objective: Any,
    model: ModelParams,
    steps: int,
    k: int,
    seed: int = 0,
    lr: float = 0.1,
    policy: Optional[RankPolicy] = None,
) -> SpectrumReport:
    """Record oracle gradients over steps minibatches.

    Between recordings the parameters take a plain gradient step of size lr
    (0 keeps them fixed), so the recorded gradients follow a training
    trajectory. Spectra hold the top-k singular values of each 2-D gradient.
    """
    if steps < 1:
        raise ValueError(f"steps = {steps} must be positive")
    policy = policy or RankPolicy()
    batches = SeedSchedule(seed).substream(OBJECTIVE_STREAM)
    matrices = model.matrices()
    spectra = {p.name: [] for p in matrices}
    flats = {p.name: [] for p in matrices}
    grads: Dict[str, np.ndarray] = dict()
    for t in range(steps):
        batch = objective.sample_batch(batches.derive(t))
        grads = objective.exact_grad(model, batch)
        for p in matrices:
            g = grads[p.name]
            kk = min(k, min(g.shape))
            sigma = np.zeros(k)
            sigma[:kk] = singular_values(g, kk, policy.method)
            spectra[p.name].append(sigma)
            flats[p.name].append(g.reshape(-1))
        if lr:
            for p in model:
                p.value -= lr * grads[p.name]
    report = SpectrumReport()
    for p in matrices:
        report.spectra[p.name] = np.array(spectra[p.name]).reshape(steps, k)
        report.cosine[p.name] = cosine_matrix(
            np.array(flats[p.name]).reshape(steps, -1).T
        )
        report.weight_rank[p.name] = matrix_rank(p.value, policy)
        if grads:
            report.grad_rank[p.name] = matrix_rank(grads[p.name], policy)
    return report
