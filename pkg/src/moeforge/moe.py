"""Sparse mixture-of-experts layer built by decomposing a pretrained FFN.

The pieces, in the order a layer comes to life:

* :func:`split_ffn` slices one FFN's hidden dimension into ``granularity``
  smaller experts whose outputs sum back to the parent's output exactly
  (in real arithmetic; to ~1e-12 in float64).
* :func:`expand_supernet` deep-copies the base FFN ``n_replicas`` times,
  splits every copy, and lays experts out replica-major
  (expert index = replica * granularity + slice).
* :func:`init_router` draws one centroid row per replica and repeats it
  ``granularity`` times, so at step 0 the top-k selection lands on the k
  slices of a single replica and the layer reproduces the base FFN.
* :func:`moe_forward` / :func:`dispatch_batch` run tokens through the layer.
  ``dispatch_batch`` groups tokens by expert and evaluates one batch per
  expert; its output is bitwise identical to looping ``moe_forward`` over
  tokens (:func:`dispatch_loop`), because both accumulate selected expert
  outputs in ascending expert order on top of a zero buffer and all matrix
  products share the kernel's fixed reduction order.
* :func:`load_balance_loss` is the utilization penalty
  ``n_experts * sum_i F_i * P_i`` with F the per-expert share of
  assignments and P the mean routing score.

Gradient contract (documented prominently because MoE variants differ
here): gate values are hard 0/1 constants and expert outputs are not
score-weighted, so the task loss sends gradients only to the selected
experts, and the router trains only through the score-mean side of the
balance loss with the assignment fractions held constant.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .ffn import FfnGrads, FfnParams, ffn_backward, ffn_forward, ffn_forward_batch
from .numkernel import (
    STREAM_ROUTER,
    ShapeError,
    ensure_finite,
    make_rng,
    mm,
    softmax_rows,
)

# A fine-grained expert is structurally an FFN with hidden width H/k.
ExpertParams = FfnParams


@dataclass
class MoeConfig:
    """Shape and seed of a supernet: n_replicas FFN copies, each split granularity ways."""

    token_dim: int
    hidden_dim: int
    n_replicas: int = 8
    granularity: int = 2
    top_k: int = 0  # 0 means "track granularity", the usual deployment
    seed: int = 0

    def __post_init__(self):
        if self.top_k == 0:
            self.top_k = self.granularity
        if self.token_dim < 1 or self.hidden_dim < 1 or self.n_replicas < 1 or self.granularity < 1:
            raise ValueError(f"MoeConfig: all dimensions must be >= 1, got {self}")
        if self.hidden_dim % self.granularity != 0:
            raise ValueError(
                f"MoeConfig: hidden_dim {self.hidden_dim} not divisible by granularity {self.granularity}"
            )
        if not 1 <= self.top_k <= self.n_experts:
            raise ValueError(f"MoeConfig: top_k {self.top_k} out of range [1, {self.n_experts}]")

    @property
    def n_experts(self) -> int:
        return self.n_replicas * self.granularity

    @property
    def expert_hidden_dim(self) -> int:
        return self.hidden_dim // self.granularity


@dataclass
class RouterParams:
    """Linear router: w_r (n_experts, token_dim), b_r (n_experts,)."""

    w_r: np.ndarray
    b_r: np.ndarray

    def __post_init__(self):
        self.w_r = np.asarray(self.w_r)
        self.b_r = np.asarray(self.b_r)
        if self.w_r.ndim != 2 or self.b_r.ndim != 1 or self.w_r.shape[0] != self.b_r.shape[0]:
            raise ShapeError("RouterParams", self.w_r.shape, self.b_r.shape)
        ensure_finite("RouterParams", self.w_r, self.b_r)

    def copy(self) -> "RouterParams":
        return RouterParams(self.w_r.copy(), self.b_r.copy())


@dataclass(frozen=True)
class Gate:
    """One token's routing outcome: ascending selected indices + full score vector."""

    selected: tuple[int, ...]
    scores: np.ndarray


@dataclass
class RoutingTrace:
    """Per-token gates for one batch, stored columnarly.

    scores is (tokens, n_experts) softmax scores; selected is
    (tokens, top_k) ascending expert indices. An empty batch is legal and
    keeps n_experts in the scores shape.
    """

    top_k: int
    scores: np.ndarray
    selected: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores)
        self.selected = np.asarray(self.selected, dtype=np.int64)
        if self.scores.ndim != 2 or self.selected.ndim != 2:
            raise ShapeError("RoutingTrace", self.scores.shape, self.selected.shape)
        if self.selected.shape != (self.scores.shape[0], self.top_k):
            raise ShapeError("RoutingTrace", self.scores.shape, self.selected.shape)
        if self.selected.size and (self.selected.min() < 0 or self.selected.max() >= self.n_experts):
            raise ValueError("RoutingTrace: expert index out of range")

    @property
    def n_tokens(self) -> int:
        return self.scores.shape[0]

    @property
    def n_experts(self) -> int:
        return self.scores.shape[1]

    def __len__(self) -> int:
        return self.n_tokens

    def gate(self, t: int) -> Gate:
        return Gate(tuple(int(i) for i in self.selected[t]), self.scores[t])

    def gates(self) -> Iterator[Gate]:
        return (self.gate(t) for t in range(self.n_tokens))

    @classmethod
    def from_gates(cls, gates: list[Gate], n_experts: int, top_k: int) -> "RoutingTrace":
        if gates:
            scores = np.stack([g.scores for g in gates])
            selected = np.array([g.selected for g in gates], dtype=np.int64)
        else:
            scores = np.zeros((0, n_experts))
            selected = np.zeros((0, top_k), dtype=np.int64)
        return cls(top_k, scores, selected)


@dataclass
class MoeLayer:
    """The supernet: config, replica-major expert list, router."""

    config: MoeConfig
    experts: list[ExpertParams]
    router: RouterParams

    def __post_init__(self):
        cfg = self.config
        if len(self.experts) != cfg.n_experts:
            raise ValueError(f"MoeLayer: expected {cfg.n_experts} experts, got {len(self.experts)}")
        for e in self.experts:
            if e.token_dim != cfg.token_dim or e.hidden_dim != cfg.expert_hidden_dim:
                raise ShapeError("MoeLayer", e.w1.shape, (cfg.expert_hidden_dim, cfg.token_dim))
            if e.activation != self.experts[0].activation:
                raise ValueError("MoeLayer: experts must share one activation")
        if self.router.w_r.shape != (cfg.n_experts, cfg.token_dim):
            raise ShapeError("MoeLayer", self.router.w_r.shape, (cfg.n_experts, cfg.token_dim))

    def copy(self) -> "MoeLayer":
        return MoeLayer(self.config, [e.copy() for e in self.experts], self.router.copy())


def split_ffn(p: FfnParams, granularity: int) -> list[ExpertParams]:
    """Slice one FFN into `granularity` experts whose outputs sum to p's output.

    Expert j takes rows [j*H/k, (j+1)*H/k) of w1/b1, the matching columns of
    w2, and b2 / k.
    """
    if granularity < 1:
        raise ValueError(f"split_ffn: granularity must be >= 1, got {granularity}")
    if p.hidden_dim % granularity != 0:
        raise ValueError(
            f"split_ffn: hidden_dim {p.hidden_dim} not divisible by granularity {granularity}"
        )
    width = p.hidden_dim // granularity
    experts = []
    for j in range(granularity):
        rows = slice(j * width, (j + 1) * width)
        experts.append(ExpertParams(
            p.w1[rows].copy(),
            p.b1[rows].copy(),
            p.w2[:, rows].copy(),
            p.b2 / granularity,
            p.activation,
        ))
    return experts


def init_router(cfg: MoeConfig, rng: np.random.Generator, dtype=np.float64) -> RouterParams:
    """Centroid-replicated router init.

    One centroid row per replica, drawn N(0, 1/sqrt(token_dim)) to keep the
    initial score entropy high, then each row repeated `granularity` times
    contiguously. Bias starts at zero and is replicated by the same rule.
    """
    centroids = (rng.normal(size=(cfg.n_replicas, cfg.token_dim)) / np.sqrt(cfg.token_dim)).astype(dtype)
    w_r = np.repeat(centroids, cfg.granularity, axis=0)
    b_r = np.zeros(cfg.n_experts, dtype=dtype)
    return RouterParams(w_r, b_r)


def expand_supernet(base: FfnParams, cfg: MoeConfig) -> MoeLayer:
    """Replicate the base FFN n_replicas times, split each copy, attach a grouped router."""
    if base.token_dim != cfg.token_dim or base.hidden_dim != cfg.hidden_dim:
        raise ShapeError("expand_supernet", base.w1.shape, (cfg.hidden_dim, cfg.token_dim))
    experts: list[ExpertParams] = []
    for _ in range(cfg.n_replicas):
        experts.extend(split_ffn(base, cfg.granularity))
    router = init_router(cfg, make_rng(cfg.seed, STREAM_ROUTER), dtype=base.w1.dtype)
    return MoeLayer(cfg, experts, router)


def route_batch(r: RouterParams, tokens: np.ndarray) -> np.ndarray:
    """Softmax router scores for a (tokens, dim) matrix; rows sum to 1."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] != r.w_r.shape[1]:
        raise ShapeError("route_batch", tokens.shape, r.w_r.shape)
    return softmax_rows(mm(tokens, r.w_r.T) + r.b_r)


def route(r: RouterParams, x: np.ndarray) -> np.ndarray:
    """Score vector for a single token; the one-row case of route_batch."""
    x = np.asarray(x)
    if x.ndim != 1 or x.shape[0] != r.w_r.shape[1]:
        raise ShapeError("route", x.shape, r.w_r.shape)
    return route_batch(r, x[None, :])[0]


def top_k_select_rows(scores: np.ndarray, top_k: int) -> np.ndarray:
    """Ascending indices of the top_k largest entries per row.

    Ties break toward the lowest index (stable argsort on negated scores).
    """
    scores = np.asarray(scores)
    if not 1 <= top_k <= scores.shape[-1]:
        raise ValueError(f"top_k {top_k} out of range [1, {scores.shape[-1]}]")
    order = np.argsort(-scores, axis=-1, kind="stable")
    return np.sort(order[..., :top_k], axis=-1)


def top_k_gate(scores: np.ndarray, top_k: int) -> Gate:
    """Hard top-k gate over one score vector."""
    scores = np.asarray(scores)
    if scores.ndim != 1:
        raise ShapeError("top_k_gate", scores.shape)
    sel = top_k_select_rows(scores[None, :], top_k)[0]
    return Gate(tuple(int(i) for i in sel), scores)


def moe_forward(layer: MoeLayer, x: np.ndarray):
    """Route one token and sum the selected experts' outputs.

    Accumulation starts from a zero buffer and adds experts in ascending
    index order, the exact fold dispatch_batch reproduces.
    """
    x = np.asarray(x)
    cfg = layer.config
    if x.ndim != 1 or x.shape[0] != cfg.token_dim:
        raise ShapeError("moe_forward", x.shape, (cfg.token_dim,))
    scores = route(layer.router, x)
    gate = top_k_gate(scores, cfg.top_k)
    out = np.zeros(cfg.token_dim, dtype=np.result_type(x, layer.experts[0].w1))
    for i in gate.selected:
        out += ffn_forward(layer.experts[i], x)
    return out, gate


def dispatch_loop(layer: MoeLayer, tokens: np.ndarray):
    """Sequential reference path: one moe_forward call per token.

    This is the plain loop the batched engine is checked against (and the
    baseline the bench command times).
    """
    tokens = np.asarray(tokens)
    cfg = layer.config
    if tokens.ndim != 2 or tokens.shape[1] != cfg.token_dim:
        raise ShapeError("dispatch_loop", tokens.shape, (cfg.token_dim,))
    gates: list[Gate] = []
    rows = []
    for t in range(tokens.shape[0]):
        y, gate = moe_forward(layer, tokens[t])
        rows.append(y)
        gates.append(gate)
    if rows:
        out = np.stack(rows)
    else:
        out = np.zeros((0, cfg.token_dim), dtype=np.result_type(tokens, layer.experts[0].w1))
    return out, RoutingTrace.from_gates(gates, cfg.n_experts, cfg.top_k)


def dispatch_batch(layer: MoeLayer, tokens: np.ndarray, threads: int = 1):
    """Route a whole batch, then run one batched FFN evaluation per expert.

    Token indices are grouped by selected expert, each expert processes its
    gathered tokens in one call (optionally across a thread pool), and the
    partial outputs are scattered back in ascending expert order. The result
    is bitwise identical to :func:`dispatch_loop`.
    """
    tokens = np.asarray(tokens)
    cfg = layer.config
    if tokens.ndim != 2 or tokens.shape[1] != cfg.token_dim:
        raise ShapeError("dispatch_batch", tokens.shape, (cfg.token_dim,))
    scores = route_batch(layer.router, tokens)
    selected = top_k_select_rows(scores, cfg.top_k)
    trace = RoutingTrace(cfg.top_k, scores, selected)

    assign = [np.nonzero((selected == e).any(axis=1))[0] for e in range(cfg.n_experts)]

    def eval_expert(e: int):
        idx = assign[e]
        if idx.size == 0:
            return None
        return ffn_forward_batch(layer.experts[e], tokens[idx])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            partials = list(pool.map(eval_expert, range(cfg.n_experts)))
    else:
        partials = [eval_expert(e) for e in range(cfg.n_experts)]

    out = np.zeros((tokens.shape[0], cfg.token_dim), dtype=np.result_type(tokens, layer.experts[0].w1))
    # Ascending scatter: per token this reproduces moe_forward's zero + add fold.
    for e in range(cfg.n_experts):
        if partials[e] is not None:
            out[assign[e]] += partials[e]
    return out, trace


def assignment_counts(trace: RoutingTrace) -> np.ndarray:
    """Number of token assignments each expert received."""
    return np.bincount(trace.selected.ravel(), minlength=trace.n_experts).astype(np.int64)


def assignment_fractions(trace: RoutingTrace) -> np.ndarray:
    """Per-expert share of assignments; sums to 1 (counts / (tokens * top_k)).

    This is the single definition of the balance loss's F term; analytics
    reuses it so the two can never drift apart.
    """
    if trace.n_tokens < 1:
        raise ValueError("assignment_fractions: empty trace")
    return assignment_counts(trace) / float(trace.n_tokens * trace.top_k)


def mean_scores(trace: RoutingTrace) -> np.ndarray:
    """Mean routing score per expert across the trace's tokens."""
    if trace.n_tokens < 1:
        raise ValueError("mean_scores: empty trace")
    return trace.scores.mean(axis=0)


def load_balance_loss(trace: RoutingTrace) -> float:
    """Utilization penalty n_experts * sum_i F_i * P_i.

    Equals 1.0 exactly under uniform routing with uniform scores and grows
    as assignment mass concentrates.
    """
    f = assignment_fractions(trace)
    p = mean_scores(trace)
    return float(trace.n_experts * np.sum(f * p))


def total_loss(task: float, aux: float, alpha: float = 0.01) -> float:
    """Training objective: task loss plus alpha-weighted balance loss."""
    total = float(task) + float(alpha) * float(aux)
    if not np.isfinite(total):
        raise ValueError(f"total_loss: non-finite result from ({task}, {aux}, {alpha})")
    return total


@dataclass
class MoeGrads:
    """Gradients from one moe_backward call.

    expert_grads holds entries for selected experts only; an absent index
    means that expert's gradient is identically zero.
    """

    expert_grads: dict[int, FfnGrads]
    router_w: np.ndarray
    router_b: np.ndarray
    dx: np.ndarray


def moe_backward(layer: MoeLayer, x: np.ndarray, gate: Gate, upstream: np.ndarray,
                 aux_weight: float = 0.0) -> MoeGrads:
    """Gradients of upstream . h(x) plus the token's balance-loss share.

    Gate values are constants: selected experts get chain-rule gradients,
    unselected experts get zero, and no task gradient reaches the router.
    The router term differentiates aux_weight * n_experts * sum_i F_i s_i
    with F_i frozen at this token's own assignment fractions (g_i / top_k).
    """
    cfg = layer.config
    x = np.asarray(x)
    upstream = np.asarray(upstream)
    if x.shape != (cfg.token_dim,) or upstream.shape != (cfg.token_dim,):
        raise ShapeError("moe_backward", x.shape, upstream.shape, (cfg.token_dim,))
    if gate.scores.shape != (cfg.n_experts,) or len(gate.selected) != cfg.top_k:
        raise ValueError(
            f"moe_backward: gate with {len(gate.selected)} selections over {gate.scores.shape} scores "
            f"does not match layer ({cfg.top_k} of {cfg.n_experts})"
        )
    if any(not 0 <= i < cfg.n_experts for i in gate.selected):
        raise ValueError(f"moe_backward: gate indices {gate.selected} out of range")

    expert_grads: dict[int, FfnGrads] = {}
    dx = np.zeros_like(x)
    for i in gate.selected:
        g, dxi = ffn_backward(layer.experts[i], x, upstream)
        expert_grads[i] = g
        dx += dxi

    if aux_weight == 0.0:
        router_w = np.zeros_like(layer.router.w_r)
        router_b = np.zeros_like(layer.router.b_r)
    else:
        w = np.zeros(cfg.n_experts, dtype=gate.scores.dtype)
        w[list(gate.selected)] = aux_weight * cfg.n_experts / cfg.top_k
        s = gate.scores
        c = s * (w - np.sum(w * s))  # softmax jacobian applied to the weighted score sum
        router_w = c[:, None] * x[None, :]
        router_b = c
    return MoeGrads(expert_grads, router_w, router_b, dx)


def balance_loss_backward(trace: RoutingTrace, tokens: np.ndarray, aux_weight: float):
    """Exact router gradient of aux_weight * load_balance_loss(trace).

    Assignment fractions are held constant; only the score means
    differentiate. Returns (d w_r, d b_r).
    """
    tokens = np.asarray(tokens)
    if trace.n_tokens < 1:
        raise ValueError("balance_loss_backward: empty trace")
    if tokens.shape[0] != trace.n_tokens:
        raise ShapeError("balance_loss_backward", tokens.shape, trace.scores.shape)
    f = assignment_fractions(trace)
    w = (aux_weight * trace.n_experts / trace.n_tokens) * f
    s = trace.scores
    inner = np.sum(s * w, axis=1, keepdims=True)
    c = s * (w[None, :] - inner)
    d_wr = mm(c.T, tokens)
    d_br = c.sum(axis=0)
    return d_wr, d_br
