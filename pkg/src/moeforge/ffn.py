"""Two-layer feed-forward network: parameters, forward pass, manual backward.

The network computes ``w2 @ act(w1 @ x + b1) + b2``. A single-token call is
defined as the one-row case of the batched call, so looping tokens one at a
time and pushing them through in a batch give bitwise identical rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkernel import ShapeError, activation_pair, ensure_finite, mm


@dataclass
class FfnParams:
    """Weights of one FFN: w1 (hidden, dim), b1 (hidden,), w2 (dim, hidden), b2 (dim,)."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        self.w1 = np.asarray(self.w1)
        self.b1 = np.asarray(self.b1)
        self.w2 = np.asarray(self.w2)
        self.b2 = np.asarray(self.b2)
        if self.w1.ndim != 2 or self.w2.ndim != 2 or self.b1.ndim != 1 or self.b2.ndim != 1:
            raise ShapeError("FfnParams", self.w1.shape, self.b1.shape, self.w2.shape, self.b2.shape)
        hidden, dim = self.w1.shape
        if hidden < 1 or dim < 1:
            raise ShapeError("FfnParams", self.w1.shape)
        if self.b1.shape != (hidden,) or self.w2.shape != (dim, hidden) or self.b2.shape != (dim,):
            raise ShapeError("FfnParams", self.w1.shape, self.b1.shape, self.w2.shape, self.b2.shape)
        activation_pair(self.activation)
        ensure_finite("FfnParams", self.w1, self.b1, self.w2, self.b2)

    @property
    def token_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    def copy(self) -> "FfnParams":
        return FfnParams(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(), self.activation)

    def astype(self, dtype) -> "FfnParams":
        return FfnParams(
            self.w1.astype(dtype), self.b1.astype(dtype),
            self.w2.astype(dtype), self.b2.astype(dtype), self.activation,
        )


@dataclass
class FfnGrads:
    """Parameter gradients, same shapes as the FfnParams they differentiate."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


def zero_grads(p: FfnParams) -> FfnGrads:
    return FfnGrads(
        np.zeros_like(p.w1), np.zeros_like(p.b1),
        np.zeros_like(p.w2), np.zeros_like(p.b2),
    )


def init_ffn(token_dim: int, hidden_dim: int, rng: np.random.Generator,
             activation: str = "relu", dtype=np.float64) -> FfnParams:
    """Fan-in scaled normal weights, zero biases."""
    w1 = (rng.normal(size=(hidden_dim, token_dim)) / np.sqrt(token_dim)).astype(dtype)
    w2 = (rng.normal(size=(token_dim, hidden_dim)) / np.sqrt(hidden_dim)).astype(dtype)
    b1 = np.zeros(hidden_dim, dtype=dtype)
    b2 = np.zeros(token_dim, dtype=dtype)
    return FfnParams(w1, b1, w2, b2, activation)


def ffn_forward_batch(p: FfnParams, x: np.ndarray) -> np.ndarray:
    """Forward over a (tokens, dim) matrix; returns (tokens, dim)."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != p.token_dim:
        raise ShapeError("ffn_forward_batch", x.shape, p.w1.shape)
    act, _ = activation_pair(p.activation)
    hidden = act(mm(x, p.w1.T) + p.b1)
    return mm(hidden, p.w2.T) + p.b2


def ffn_forward(p: FfnParams, x: np.ndarray) -> np.ndarray:
    """Forward for a single token vector; the one-row case of the batch path."""
    x = np.asarray(x)
    if x.ndim != 1 or x.shape[0] != p.token_dim:
        raise ShapeError("ffn_forward", x.shape, p.w1.shape)
    return ffn_forward_batch(p, x[None, :])[0]


def ffn_backward_batch(p: FfnParams, x: np.ndarray, upstream: np.ndarray):
    """Chain-rule gradients for a batch.

    Returns (FfnGrads summed over the batch, input gradient of shape (tokens, dim)).
    """
    x = np.asarray(x)
    upstream = np.asarray(upstream)
    if x.ndim != 2 or x.shape[1] != p.token_dim:
        raise ShapeError("ffn_backward_batch", x.shape, p.w1.shape)
    if upstream.shape != x.shape:
        raise ShapeError("ffn_backward_batch", upstream.shape, x.shape)
    act, act_grad = activation_pair(p.activation)
    z1 = mm(x, p.w1.T) + p.b1
    a = act(z1)
    g_w2 = mm(upstream.T, a)
    g_b2 = upstream.sum(axis=0)
    dz1 = mm(upstream, p.w2) * act_grad(z1)
    g_w1 = mm(dz1.T, x)
    g_b1 = dz1.sum(axis=0)
    dx = mm(dz1, p.w1)
    return FfnGrads(g_w1, g_b1, g_w2, g_b2), dx


def ffn_backward(p: FfnParams, x: np.ndarray, upstream: np.ndarray):
    """Single-token gradients; returns (FfnGrads, input gradient vector)."""
    x = np.asarray(x)
    upstream = np.asarray(upstream)
    if x.ndim != 1 or x.shape[0] != p.token_dim:
        raise ShapeError("ffn_backward", x.shape, p.w1.shape)
    if upstream.shape != (p.token_dim,):
        raise ShapeError("ffn_backward", upstream.shape, (p.token_dim,))
    grads, dx = ffn_backward_batch(p, x[None, :], upstream[None, :])
    return grads, dx[0]
