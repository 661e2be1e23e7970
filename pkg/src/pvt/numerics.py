"""Dense kernels shared by every attention variant.

All functions are pure: they never modify their inputs and allocate fresh
output arrays. Arithmetic follows the dtype of the operands (float64 for
verification runs, float32 for throughput runs), so the same code serves
both precision modes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

DEFAULT_EPS = 1e-5


def _as_matrix(x, name: str) -> np.ndarray:
    m = np.asarray(x)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-d, got {m.ndim}-d with shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product. Inner dimensions must agree."""
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax with max-subtraction so large logits do not overflow."""
    m = _as_matrix(m, "m")
    if not np.isfinite(m).all():
        raise NumericError("softmax_rows requires finite input")
    shifted = m - m.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def relu(x) -> np.ndarray:
    return np.maximum(x, 0)


@dataclass(frozen=True)
class LayerNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        gamma = np.asarray(self.gamma)
        beta = np.asarray(self.beta)
        if gamma.ndim != 1 or beta.ndim != 1 or gamma.shape != beta.shape:
            raise ShapeError(
                f"gamma/beta must be equal-length vectors, got {gamma.shape} and {beta.shape}"
            )
        if self.eps <= 0:
            raise ConfigError(f"layer-norm eps must be positive, got {self.eps}")

    @property
    def dim(self) -> int:
        return self.gamma.shape[0]


def layer_norm(m, params: LayerNormParams) -> np.ndarray:
    """Normalize each row to zero mean / unit variance, then scale and shift.

    Uses the biased (1/D) variance. A constant row has zero variance; eps
    keeps the division defined, so the normalized row is all zeros and the
    output is just beta.
    """
    m = _as_matrix(m, "m")
    if m.shape[1] != params.dim:
        raise ShapeError(f"layer_norm over dim {params.dim} got rows of width {m.shape[1]}")
    mean = m.mean(axis=1, keepdims=True)
    var = m.var(axis=1, keepdims=True)
    normed = (m - mean) / np.sqrt(var + params.eps)
    return normed * params.gamma + params.beta


@dataclass(frozen=True)
class MlpParams:
    """Two-layer MLP with ReLU in between; widths D -> H -> D."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        w1, b1 = np.asarray(self.w1), np.asarray(self.b1)
        w2, b2 = np.asarray(self.w2), np.asarray(self.b2)
        if w1.ndim != 2 or w2.ndim != 2:
            raise ShapeError("MLP weights must be 2-d")
        if w1.shape[1] != w2.shape[0]:
            raise ShapeError(f"hidden widths disagree: {w1.shape} then {w2.shape}")
        if b1.shape != (w1.shape[1],) or b2.shape != (w2.shape[1],):
            raise ShapeError("MLP bias widths do not match the weight columns")

    @property
    def dim_in(self) -> int:
        return self.w1.shape[0]

    @property
    def dim_out(self) -> int:
        return self.w2.shape[1]


def mlp_forward(m, params: MlpParams) -> np.ndarray:
    h = relu(matmul(m, params.w1) + params.b1)
    return matmul(h, params.w2) + params.b2


def init_layer_norm(dim: int, dtype=np.float64) -> LayerNormParams:
    """Identity layer norm: gamma=1, beta=0."""
    return LayerNormParams(np.ones(dim, dtype=dtype), np.zeros(dim, dtype=dtype))


def init_linear(rng: np.random.Generator, dim_in: int, dim_out: int, dtype=np.float64):
    """Weight and bias uniform in [-1/sqrt(dim_in), 1/sqrt(dim_in)]."""
    bound = 1.0 / np.sqrt(dim_in)
    w = rng.uniform(-bound, bound, size=(dim_in, dim_out)).astype(dtype)
    b = rng.uniform(-bound, bound, size=dim_out).astype(dtype)
    return w, b


def init_mlp(rng: np.random.Generator, dim: int, hidden: int | None = None,
             dtype=np.float64) -> MlpParams:
    if hidden is None:
        hidden = 2 * dim
    w1, b1 = init_linear(rng, dim, hidden, dtype)
    w2, b2 = init_linear(rng, hidden, dim, dtype)
    return MlpParams(w1, b1, w2, b2)
