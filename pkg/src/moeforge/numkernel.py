"""Dense numeric kernel: matrix/vector products, softmax, activations, RNG.

Values are plain numpy arrays: a ``Matrix`` is a 2-D float array with
row-major semantics, a ``Vector`` is 1-D. float64 is the default precision;
float32 is an opt-in mode and callers using it must relax tolerances.

Reproducibility contract
------------------------
Every matrix product in this package funnels through :func:`mm`, which
canonicalizes operand layout and evaluates through a single fixed-order
reduction (``np.einsum``, no BLAS). This buys two properties everything
downstream leans on:

* row stability: ``mm(a, b)[i]`` is bitwise identical to
  ``mm(a[i:i+1], b)[0]``, no matter how many rows are evaluated together
  or whether the operands are views or copies;
* thread independence: results do not depend on process thread settings.

:func:`softmax_rows` keeps the same row-stability property. Together these
make "batched path equals per-token loop, bitwise" a provable invariant
rather than a numerical accident.
"""

from __future__ import annotations

import math

import numpy as np

Matrix = np.ndarray  # 2-D, row-major
Vector = np.ndarray  # 1-D

DEFAULT_DTYPE = np.float64

# Stream ids for make_rng; unique across the package so one user seed never
# feeds the same underlying sequence to two consumers.
STREAM_ROUTER = 1
STREAM_TASK = 2
STREAM_EVAL = 3
STREAM_TRAIN = 4
STREAM_PROBE = 5
STREAM_MODEL = 6
STREAM_SHUFFLE = 7
STREAM_BENCH = 8
STREAM_GRADCHECK = 9


class ShapeError(ValueError):
    """Operand shapes do not line up; message names every shape involved."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(int(n) for n in s) for s in shapes)
        joined = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


def mm(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with a fixed, layout-independent reduction order.

    Operands are brought to C-contiguous layout before the einsum so the
    inner-loop kernel (and therefore the exact rounding) depends only on the
    shared dimension, never on how the caller sliced or transposed its
    arrays.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("mm", a.shape, b.shape)
    return np.einsum("mn,np->mp", np.ascontiguousarray(a), np.ascontiguousarray(b))


def matvec(m: Matrix, v: Vector) -> Vector:
    """``m @ v``, evaluated as the one-row case of :func:`mm`.

    Routing through mm keeps a lone token's product bitwise identical to the
    matching row of a batched product.
    """
    m = np.asarray(m)
    v = np.asarray(v)
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeError("matvec", m.shape, v.shape)
    return mm(v[None, :], m.T)[0]


def softmax_rows(z: Matrix) -> Matrix:
    """Row-wise softmax, max-stabilized; bitwise row-stable."""
    z = np.asarray(z)
    if z.ndim != 2 or z.shape[1] == 0:
        raise ShapeError("softmax_rows", z.shape)
    m = np.max(z, axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax(v: Vector) -> Vector:
    """Numerically stabilized softmax of a non-empty vector."""
    v = np.asarray(v)
    if v.ndim != 1 or v.size == 0:
        raise ShapeError("softmax", v.shape)
    return softmax_rows(v[None, :])[0]


def relu(v: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(v), 0.0)


def relu_grad(v: np.ndarray) -> np.ndarray:
    # Subgradient convention: exactly 0 at the kink.
    v = np.asarray(v)
    return (v > 0).astype(v.dtype)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(v: np.ndarray) -> np.ndarray:
    """tanh-form gelu (self-consistent with :func:`gelu_grad`)."""
    v = np.asarray(v)
    inner = _GELU_C * (v + _GELU_A * v**3)
    return 0.5 * v * (1.0 + np.tanh(inner))


def gelu_grad(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v)
    inner = _GELU_C * (v + _GELU_A * v**3)
    t = np.tanh(inner)
    d_inner = _GELU_C * (1.0 + 3.0 * _GELU_A * v**2)
    return 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * d_inner


ACTIVATIONS = {
    "relu": (relu, relu_grad),
    "gelu": (gelu, gelu_grad),
}


def activation_pair(name: str):
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; expected one of {sorted(ACTIVATIONS)}") from None


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Seeded PCG64 generator.

    The (seed, stream) pair fully determines the draw sequence on every
    platform. Distinct stream ids the package uses are listed at module top.
    """
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(int(stream),))))


def ensure_finite(label: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError(f"{label}: non-finite values encountered")
