"""Baseline task-specific layers sharing one interface with the slot-MoE layer.

Every baseline maps an N x D bag to N x D_out (per-instance output); only
the slot-MoE layer emits a slot set.  Variants:

  * linear          ReLU(x @ W^T), the layer all of this replaces
  * soft_moe        slot-pooled experts recombined per instance
  * sparse_softmax  top-k gating with expert capacity and token dropping
  * sparse_sinkhorn same dispatch, Sinkhorn-Knopp-normalized gate weights
  * sparse_mh       instances split into H sub-tokens routed to 2-layer FFN
                    experts of hidden width floor(H*D*D_out/(D+D_out))

Sparse dispatch drops over-capacity tokens (they contribute a zero vector
from that expert) with capacity ceil(capacity_factor * tokens * k / E),
factor 1.25 while training and 2.0 at inference.  No load-balancing
auxiliary loss is applied.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, EmptyBagError

FF_DROPOUT = 0.25       # after every expert/feedforward ReLU while training
FEATURE_DROPOUT = 0.1   # on raw input features while training
NEG_INF = -1e9

DEFAULT_EXPERTS = 5
DEFAULT_TOPK = 2
CAPACITY_TRAIN = 1.25
CAPACITY_EVAL = 2.0
SINKHORN_ITERS = 3
SOFT_MOE_TOTAL_SLOTS = 200


def _kaiming(rng, rows, cols):
    bound = np.sqrt(6.0 / cols)
    return rng.uniform(-bound, bound, size=(rows, cols))


def _check_bag(x):
    if x.shape[0] == 0:
        raise EmptyBagError("cannot run a layer on an empty bag (N = 0)")


class LinearLayer:
    """f(x) = ReLU(x @ W^T) applied per instance; no bias."""

    output_kind = "per_instance"

    def __init__(self, d, d_out, rng=None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.d, self.d_out, self.dtype = d, d_out, dtype
        self.params = {"w": ad.Tensor(_kaiming(rng, d_out, d), requires_grad=True,
                                      dtype=dtype, name="w")}

    def forward(self, x, training=False, rng=None):
        _check_bag(x)
        if training:
            x = ad.dropout(x, FEATURE_DROPOUT, training=True, rng=rng)
        out = ad.relu(ad.matmul(x, ad.transpose(self.params["w"])))
        if training:
            out = ad.dropout(out, FF_DROPOUT, training=True, rng=rng)
        return out

    def __call__(self, x, training=False, rng=None):
        return self.forward(x, training, rng)

    def count_params(self):
        return int(sum(t.data.size for t in self.params.values()))


class SoftMoELayer:
    """Slot-pooling experts whose outputs are recombined per instance.

    Dispatch: per-slot softmax over the N instances of <x_i, s_j> pools a
    weighted average into each slot; expert k processes its own S slots.
    Combine: per-instance softmax of the same logits over all E*S slots
    mixes the expert outputs back into N updated instance embeddings.
    """

    output_kind = "per_instance"

    def __init__(self, d, d_out, experts=DEFAULT_EXPERTS,
                 total_slots=SOFT_MOE_TOTAL_SLOTS, rng=None, dtype=np.float32):
        from .layer import slots_per_expert
        rng = rng or np.random.default_rng(0)
        self.d, self.d_out, self.experts = d, d_out, experts
        self.slots = slots_per_expert(total_slots, experts)
        self.total_slots = self.slots * experts
        self.dtype = dtype
        self.params = {"slots": ad.Tensor(
            rng.normal(0.0, 1.0 / np.sqrt(d), size=(self.total_slots, d)),
            requires_grad=True, dtype=dtype, name="slots")}
        for k in range(experts):
            self.params[f"expert{k}.w"] = ad.Tensor(
                _kaiming(rng, d_out, d), requires_grad=True, dtype=dtype,
                name=f"expert{k}.w")

    def forward(self, x, training=False, rng=None):
        _check_bag(x)
        if training:
            x = ad.dropout(x, FEATURE_DROPOUT, training=True, rng=rng)
        logits = ad.matmul(self.params["slots"], ad.transpose(x), accumulate_f64=True)
        dispatch = ad.softmax(logits, axis=1)            # rows over N sum to 1
        combine = ad.softmax(logits, axis=0)             # cols over slots sum to 1
        pooled = ad.matmul(dispatch, x, accumulate_f64=True)
        outs = []
        for k in range(self.experts):
            sl = ad.slice_rows(pooled, k * self.slots, (k + 1) * self.slots)
            z = ad.relu(ad.matmul(sl, ad.transpose(self.params[f"expert{k}.w"])))
            if training:
                z = ad.dropout(z, FF_DROPOUT, training=True, rng=rng)
            outs.append(z)
        slot_out = ad.concat_rows(outs)                  # (E*S) x d_out
        return ad.matmul(ad.transpose(combine), slot_out, accumulate_f64=True)

    def __call__(self, x, training=False, rng=None):
        return self.forward(x, training, rng)

    def combine_weights(self, x):
        """Per-instance combine distribution over slots (N x E*S), for checks."""
        with ad.no_grad():
            logits = ad.matmul(self.params["slots"], ad.transpose(x), accumulate_f64=True)
            return ad.softmax(logits, axis=0).data.T

    def count_params(self):
        return int(sum(t.data.size for t in self.params.values()))


def topk_mask(logits: np.ndarray, k: int) -> np.ndarray:
    """0/1 indicator of each row's k largest entries (ties: lower index wins)."""
    n, e = logits.shape
    if k > e:
        raise ConfigError(f"top-k k={k} exceeds expert count {e}")
    # stable selection: sort by (-logit, index)
    order = np.lexsort((np.broadcast_to(np.arange(e), (n, e)), -logits), axis=1)
    mask = np.zeros_like(logits, dtype=bool)
    np.put_along_axis(mask, order[:, :k], True, axis=1)
    return mask


def expert_capacity(tokens: int, k: int, experts: int, factor: float) -> int:
    return int(math.ceil(factor * tokens * k / experts))


def select_within_capacity(weights: np.ndarray, mask: np.ndarray, capacity: int):
    """Per expert, keep at most ``capacity`` masked tokens by descending weight.

    Ties break toward the lower token index.  Returns a boolean keep-matrix.
    """
    keep = np.zeros_like(mask)
    for e in range(weights.shape[1]):
        cand = np.nonzero(mask[:, e])[0]
        if cand.size > capacity:
            # stable sort on (-weight, index): lexsort's last key is primary
            order = np.lexsort((cand, -weights[cand, e]))
            cand = cand[order[:capacity]]
        keep[cand, e] = True
    return keep


def sinkhorn_gate(logits: ad.Tensor, iters: int = SINKHORN_ITERS) -> ad.Tensor:
    """Sinkhorn-Knopp normalization of exp(logits), ending row-stochastic.

    Each round rescales columns to mass N/E and rows to mass 1; a final
    row normalization guarantees rows sum to 1 regardless of iters.
    """
    if iters < 1:
        raise ConfigError(f"sinkhorn iters must be >= 1, got {iters}")
    n, e = logits.shape
    shift = ad.constant(np.full(logits.shape, logits.data.max()), dtype=logits.dtype)
    m = ad.exp(ad.add(logits, ad.scale(shift, -1.0)))
    col_target = n / e
    for _ in range(iters):
        m = ad.div_cols(m, ad.scale(ad.sum_cols(m), 1.0 / col_target))
        m = ad.div_rows(m, ad.sum_rows(m))
    return ad.div_rows(m, ad.sum_rows(m))


def _masked_renormalize(scores: ad.Tensor, keep_topk: np.ndarray) -> ad.Tensor:
    """Softmax over each row's selected entries only (others get weight 0)."""
    penalty = ad.constant(np.where(keep_topk, 0.0, NEG_INF).astype(scores.dtype.type),
                          dtype=scores.dtype)
    return ad.softmax(ad.add(scores, penalty), axis=1)


class _SparseDispatchMixin:
    """Shared top-k dispatch with capacity for the sparse layers."""

    def _dispatch(self, tokens: ad.Tensor, score_logits: ad.Tensor, training, rng,
                  run_expert):
        n = tokens.shape[0]
        mask = topk_mask(score_logits.data, self.k)
        weights = _masked_renormalize(score_logits, mask)
        factor = CAPACITY_TRAIN if training else CAPACITY_EVAL
        capacity = expert_capacity(n, self.k, self.experts, factor)
        keep = select_within_capacity(weights.data, mask, capacity)
        pieces = []
        for e in range(self.experts):
            idx = np.nonzero(keep[:, e])[0]
            if idx.size == 0:
                continue
            sub = ad.gather_rows(tokens, idx)
            out = run_expert(e, sub, training, rng)
            w_col = ad.slice_columns(ad.gather_rows(weights, idx), e, e + 1)
            pieces.append(ad.scatter_rows(ad.scale_rows(out, w_col), idx, n))
        if not pieces:
            return ad.constant(np.zeros((n, self.out_cols), dtype=tokens.dtype.type),
                               dtype=tokens.dtype)
        total = pieces[0]
        for p in pieces[1:]:
            total = ad.add(total, p)
        return total


class SparseMoELayer(_SparseDispatchMixin):
    """Top-k gated experts (softmax or sinkhorn gate), one linear+ReLU each."""

    output_kind = "per_instance"

    def __init__(self, d, d_out, experts=DEFAULT_EXPERTS, k=DEFAULT_TOPK,
                 gate="softmax", sinkhorn_iters=SINKHORN_ITERS, rng=None,
                 dtype=np.float32):
        if k > experts:
            raise ConfigError(f"top-k k={k} exceeds expert count {experts}")
        if gate not in ("softmax", "sinkhorn"):
            raise ConfigError(f"unknown gate {gate!r}")
        rng = rng or np.random.default_rng(0)
        self.d, self.d_out, self.experts, self.k = d, d_out, experts, k
        self.gate = gate
        self.sinkhorn_iters = sinkhorn_iters
        self.out_cols = d_out
        self.dtype = dtype
        self.params = {"gate": ad.Tensor(_kaiming(rng, experts, d), requires_grad=True,
                                         dtype=dtype, name="gate")}
        for e in range(experts):
            self.params[f"expert{e}.w"] = ad.Tensor(
                _kaiming(rng, d_out, d), requires_grad=True, dtype=dtype,
                name=f"expert{e}.w")

    def _run_expert(self, e, sub, training, rng):
        z = ad.relu(ad.matmul(sub, ad.transpose(self.params[f"expert{e}.w"])))
        if training:
            z = ad.dropout(z, FF_DROPOUT, training=True, rng=rng)
        return z

    def forward(self, x, training=False, rng=None):
        _check_bag(x)
        if training:
            x = ad.dropout(x, FEATURE_DROPOUT, training=True, rng=rng)
        logits = ad.matmul(x, ad.transpose(self.params["gate"]))
        if self.gate == "sinkhorn":
            # log of the Sinkhorn weights; masked softmax then renormalizes
            # the kept top-k entries to sum 1, mirroring the softmax path.
            scores = ad.log(sinkhorn_gate(logits, self.sinkhorn_iters))
        else:
            scores = logits
        return self._dispatch(x, scores, training, rng, self._run_expert)

    def __call__(self, x, training=False, rng=None):
        return self.forward(x, training, rng)

    def count_params(self):
        return int(sum(t.data.size for t in self.params.values()))


def multihead_hidden_dim(d: int, d_out: int, heads: int) -> int:
    """FFN width that matches one dense d x d_out expert: floor(H*D*D'/(D+D'))."""
    return (heads * d * d_out) // (d + d_out)


class SparseMultiheadLayer(_SparseDispatchMixin):
    """Sub-token sparse MoE: split instances into H pieces, route N*H tokens."""

    output_kind = "per_instance"

    def __init__(self, d, d_out, heads=16, experts=DEFAULT_EXPERTS, k=DEFAULT_TOPK,
                 rng=None, dtype=np.float32):
        if d % heads or d_out % heads:
            raise ConfigError(
                f"d {d} and d_out {d_out} must both be divisible by heads {heads}")
        if k > experts:
            raise ConfigError(f"top-k k={k} exceeds expert count {experts}")
        rng = rng or np.random.default_rng(0)
        self.d, self.d_out, self.heads, self.experts, self.k = d, d_out, heads, experts, k
        self.token_dim = d // heads
        self.out_cols = d_out // heads
        self.hidden = multihead_hidden_dim(d, d_out, heads)
        self.dtype = dtype
        self.params = {"gate": ad.Tensor(_kaiming(rng, experts, self.token_dim),
                                         requires_grad=True, dtype=dtype, name="gate")}
        for e in range(experts):
            self.params[f"expert{e}.w1"] = ad.Tensor(
                _kaiming(rng, self.hidden, self.token_dim), requires_grad=True,
                dtype=dtype, name=f"expert{e}.w1")
            self.params[f"expert{e}.w2"] = ad.Tensor(
                _kaiming(rng, self.out_cols, self.hidden), requires_grad=True,
                dtype=dtype, name=f"expert{e}.w2")

    def _run_expert(self, e, sub, training, rng):
        h = ad.relu(ad.matmul(sub, ad.transpose(self.params[f"expert{e}.w1"])))
        if training:
            h = ad.dropout(h, FF_DROPOUT, training=True, rng=rng)
        return ad.matmul(h, ad.transpose(self.params[f"expert{e}.w2"]))

    def forward(self, x, training=False, rng=None):
        _check_bag(x)
        n = x.shape[0]
        if training:
            x = ad.dropout(x, FEATURE_DROPOUT, training=True, rng=rng)
        tokens = ad.reshape(x, (n * self.heads, self.token_dim))
        logits = ad.matmul(tokens, ad.transpose(self.params["gate"]))
        out_tokens = self._dispatch(tokens, logits, training, rng, self._run_expert)
        return ad.reshape(out_tokens, (n, self.d_out))

    def __call__(self, x, training=False, rng=None):
        return self.forward(x, training, rng)

    def count_params(self):
        return int(sum(t.data.size for t in self.params.values()))
