"""Dense matrix helpers and the two-layer compression perceptron.

Matrices are float64 numpy arrays of shape (rows, cols). The perceptron maps
h -> m -> h' with a ReLU in between; its backward pass is written out by hand
and checked against ``finite_diff_grad``.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from numpy.typing import NDArray

from kbvqa.errors import DimensionError, InvalidStateError, NumericError

Mat = NDArray[np.float64]


def as_mat(data, *, cols=None, name="matrix") -> Mat:
    """Coerce ``data`` to a finite float64 matrix, optionally checking the column count."""
    mat = np.asarray(data, dtype=np.float64)
    if mat.ndim == 1 and mat.size == 0:
        mat = mat.reshape(0, cols or 0)
    if mat.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {mat.shape}")
    if cols is not None and mat.shape[1] != cols:
        raise DimensionError(f"{name} has {mat.shape[1]} columns, expected {cols}")
    if not np.all(np.isfinite(mat)):
        raise NumericError(f"{name} contains NaN or Inf")
    return mat


@dataclass(frozen=True)
class MlpParams:
    W1: Mat
    b1: NDArray[np.float64]
    W2: Mat
    b2: NDArray[np.float64]

    def __post_init__(self):
        h, m = self.W1.shape
        if self.b1.shape != (m,) or self.W2.shape[0] != m or self.b2.shape != (self.W2.shape[1],):
            raise DimensionError(
                f"inconsistent perceptron shapes W1{self.W1.shape} b1{self.b1.shape} "
                f"W2{self.W2.shape} b2{self.b2.shape}"
            )
        if self.W2.shape[1] > h:
            raise DimensionError(f"output width {self.W2.shape[1]} exceeds input width {h}")

    @property
    def input_dim(self):
        return self.W1.shape[0]

    @property
    def hidden_dim(self):
        return self.W1.shape[1]

    @property
    def output_dim(self):
        return self.W2.shape[1]

    def arrays(self):
        return [getattr(self, f.name) for f in fields(self)]

    def replace(self, arrays) -> "MlpParams":
        return MlpParams(*[np.array(a, dtype=np.float64) for a in arrays])

    def equals(self, other):
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))


@dataclass(frozen=True)
class GradBundle:
    dW1: Mat
    db1: NDArray[np.float64]
    dW2: Mat
    db2: NDArray[np.float64]

    def arrays(self):
        return [getattr(self, f.name) for f in fields(self)]

    @classmethod
    def zeros_like(cls, params: MlpParams):
        return cls(*[np.zeros_like(a) for a in params.arrays()])

    def __add__(self, other):
        return GradBundle(*[a + b for a, b in zip(self.arrays(), other.arrays())])

    def norm(self):
        return float(np.sqrt(sum(np.sum(a * a) for a in self.arrays())))

    def max_relative_error(self, other: "GradBundle") -> float:
        """Largest elementwise difference, scaled by each tensor's largest magnitude."""
        worst = 0.0
        for a, b in zip(self.arrays(), other.arrays()):
            scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0))
            if scale == 0.0:
                continue
            worst = max(worst, float(np.max(np.abs(a - b)) / scale))
        return worst


@dataclass(frozen=True)
class MlpCache:
    params: MlpParams
    X: Mat
    Z1: Mat
    H: Mat


def init_mlp(h, m, out, *, seed=0, scale=1.0) -> MlpParams:
    rng = np.random.default_rng(seed)
    return MlpParams(
        W1=rng.normal(0.0, scale * np.sqrt(2.0 / h), size=(h, m)),
        b1=np.zeros(m),
        W2=rng.normal(0.0, scale / np.sqrt(m), size=(m, out)),
        b2=np.zeros(out),
    )


def mlp_forward(params: MlpParams, X) -> tuple[Mat, MlpCache]:
    X = as_mat(X, cols=params.input_dim, name="perceptron input")
    Z1 = X @ params.W1 + params.b1
    H = np.maximum(Z1, 0.0)
    Y = H @ params.W2 + params.b2
    return Y, MlpCache(params=params, X=X, Z1=Z1, H=H)


def mlp_backward(params: MlpParams, cache: MlpCache, dY) -> tuple[Mat, GradBundle]:
    if cache.params is not params and not (
        cache.params.W1.shape == params.W1.shape
        and cache.params.W2.shape == params.W2.shape
        and cache.params.equals(params)
    ):
        raise InvalidStateError("forward cache was produced by different parameters")
    dY = as_mat(dY, cols=params.output_dim, name="upstream gradient")
    if dY.shape[0] != cache.X.shape[0]:
        raise InvalidStateError(f"upstream gradient has {dY.shape[0]} rows, cache has {cache.X.shape[0]}")
    dW2 = cache.H.T @ dY
    db2 = dY.sum(axis=0)
    dH = dY @ params.W2.T
    # ReLU'(0) = 0
    dZ1 = dH * (cache.Z1 > 0.0)
    dW1 = cache.X.T @ dZ1
    db1 = dZ1.sum(axis=0)
    dX = dZ1 @ params.W1.T
    return dX, GradBundle(dW1=dW1, db1=db1, dW2=dW2, db2=db2)


def finite_diff_grad(loss_fn, params: MlpParams, step=1e-4) -> GradBundle:
    """Central-difference gradient of ``loss_fn`` with respect to every parameter."""
    if step <= 0:
        raise ValueError("finite-difference step must be positive")
    base = [a.copy() for a in params.arrays()]
    grads = []
    for i, arr in enumerate(base):
        grad = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            probe = [a.copy() for a in base]
            probe[i][idx] = arr[idx] + step
            f_plus = loss_fn(params.replace(probe))
            probe[i][idx] = arr[idx] - step
            f_minus = loss_fn(params.replace(probe))
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"non-finite loss while probing parameter {i} at {idx}")
            grad[idx] = (f_plus - f_minus) / (2.0 * step)
        grads.append(grad)
    return GradBundle(*grads)


def sgd_step(params: MlpParams, grads: GradBundle, lr) -> MlpParams:
    return params.replace([p - lr * g for p, g in zip(params.arrays(), grads.arrays())])


def l2_normalize_rows(X) -> Mat:
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    safe = np.where(norms > 0.0, norms, 1.0)
    return X / safe
