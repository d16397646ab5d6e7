"""Dense float32 linear algebra substrate shared by every other module.

Tensors are plain row-major numpy arrays. float32 is the pipeline carrier;
float64 inputs are accepted (and preserved) so test oracles can run at
higher precision. Dot products and reductions accumulate in 64-bit
internally to bound error on long token sequences.

Every operation validates that its output is finite: NaN/Inf raises
NonFiniteError instead of propagating silently.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.linalg

FloatArray = np.ndarray

_CARRIER = np.float32


class NonFiniteError(ValueError):
    """An operation produced (or received) NaN or Inf."""


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


def tensor(data, dtype=_CARRIER) -> FloatArray:
    """Build a row-major float tensor from nested sequences or an array."""
    return np.ascontiguousarray(np.asarray(data, dtype=dtype))


def _result_dtype(*arrays: FloatArray):
    return np.result_type(*(a.dtype for a in arrays))


def check_finite(x: FloatArray, context: str = "tensor") -> FloatArray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {context}")
    return x


def matmul(a: FloatArray, b: FloatArray) -> FloatArray:
    """Matrix product with 64-bit accumulation, cast back to the input dtype.

    Accepts (m,k)x(k,n) and the usual 1-D vector forms on either side.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    inner_a = a.shape[-1]
    inner_b = b.shape[0] if b.ndim >= 1 else None
    if a.ndim == 0 or b.ndim == 0 or inner_a != inner_b:
        raise ShapeMismatchError(f"matmul shapes {a.shape} and {b.shape} do not agree")
    out = np.matmul(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False))
    out = out.astype(_result_dtype(a, b))
    return check_finite(out, "matmul result")


def softmax_last_dim(x: FloatArray, temperature: float = 1.0) -> FloatArray:
    """Temperature softmax along the last axis, stabilized by max subtraction.

    Each slice of the output is strictly positive and sums to 1.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    x = np.asarray(x)
    check_finite(x, "softmax input")
    z = x.astype(np.float64) / float(temperature)
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)
    return check_finite(out.astype(x.dtype), "softmax result")


def layer_norm(
    x: FloatArray,
    gamma: FloatArray,
    beta: FloatArray,
    eps: float = 1e-6,
) -> FloatArray:
    """Normalize the last axis to zero mean / unit variance, then scale and shift.

    Uses population variance. With the default eps a constant slice maps to
    beta; eps=0 on a constant slice is a division by zero and raises.
    """
    x = np.asarray(x)
    gamma = np.asarray(gamma)
    beta = np.asarray(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatchError(
            f"gamma/beta must have shape ({d},), got {gamma.shape} and {beta.shape}"
        )
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=-1, keepdims=True)
    var = x64.var(axis=-1, keepdims=True)
    normed = (x64 - mean) / np.sqrt(var + eps)
    out = normed * gamma.astype(np.float64) + beta.astype(np.float64)
    return check_finite(out.astype(_result_dtype(x, gamma, beta)), "layer_norm result")


def solve_spd(a: FloatArray, b: FloatArray) -> FloatArray:
    """Solve a @ x = b for symmetric positive definite a via Cholesky.

    Factorization runs in float64 internally; the result is cast back to the
    operand dtype. Non-SPD input raises ValueError.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeMismatchError(f"expected square matrix, got {a.shape}")
    if b.shape[0] != a.shape[0]:
        raise ShapeMismatchError(f"rhs shape {b.shape} does not match matrix {a.shape}")
    check_finite(a, "solve_spd matrix")
    check_finite(b, "solve_spd rhs")
    scale = np.abs(a).max()
    if scale > 0 and np.abs(a - a.T).max() > 1e-5 * scale:
        raise ValueError("matrix is not symmetric")
    try:
        factor = scipy.linalg.cho_factor(a.astype(np.float64), lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise ValueError("matrix is not positive definite") from exc
    x = scipy.linalg.cho_solve(factor, b.astype(np.float64))
    return check_finite(x.astype(_result_dtype(a, b)), "solve_spd result")


def finite_difference_gradient(
    f: Callable[[FloatArray], float],
    x: FloatArray,
    h: float = 1e-5,
) -> FloatArray:
    """Central-difference gradient estimate of a scalar function.

    Test oracle for analytic backward passes; pass a float64 x for full
    precision.
    """
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    x = np.asarray(x)
    grad = np.zeros(x.shape, dtype=x.dtype)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return check_finite(grad, "finite-difference gradient")


class Rng:
    """Deterministic counter-based random stream (Philox 4x64).

    A given 64-bit seed produces the identical draw sequence on every run
    and platform. One instance is single-owner: concurrent use of the same
    instance is not supported.
    """

    def __init__(self, seed: int):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> FloatArray:
        return self._gen.uniform(low, high, size=size)

    def normal(self, std: float = 1.0, size=None) -> FloatArray:
        return self._gen.normal(0.0, std, size=size)

    def trunc_normal(self, size, std: float = 0.02, clip: float = 2.0) -> FloatArray:
        """Normal(0, std) with resampling of draws outside +-clip*std."""
        out = self._gen.normal(0.0, std, size=size)
        bad = np.abs(out) > clip * std
        while np.any(bad):
            out[bad] = self._gen.normal(0.0, std, size=int(bad.sum()))
            bad = np.abs(out) > clip * std
        return out

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def shuffle(self, items: Sequence) -> list:
        order = self._gen.permutation(len(items))
        return [items[i] for i in order]
