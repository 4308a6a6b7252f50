"""Multi-head soft mixture-of-experts layer with low-rank shared-factor experts.

Forward path for one bag (N x D instance features):

  1. project to mid_dim = P*H with a bias-free, activation-free matrix W
     and split the result into H contiguous P-wide head partitions;
  2. per head, score every instance against E*S trainable slot prototypes,
     softmax over the N instances per slot, and pool a weighted average
     per slot;
  3. per head and expert, transform the expert's S pooled slots with
     LayerNorm(ReLU(W_low @ (Phi @ u))) where Phi is shared by all the
     head's experts;
  4. concatenate the H head outputs feature-wise into (E*S) x D_out slot
     embeddings -- the set handed to the downstream aggregator.

The low-rank width Q defaults to the largest integer that keeps
W + Phi + W_low within the D*D_out parameter budget of the dense linear
layer this module replaces.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, EmptyBagError

INPUT_DROPOUT = 0.1
EXPERT_DROPOUT = 0.25


def solve_q(d: int, d_out: int, p: int, heads: int, experts: int) -> int:
    """Largest low-rank width whose Phi/W_low cost fits the linear budget.

    Q = floor((d*d_out - d*p*heads) / (heads*p + experts*d_out)).
    """
    budget = d * d_out - d * p * heads
    if budget <= 0:
        raise ConfigError(
            f"no parameter budget left for experts: d*p*heads = {d * p * heads} "
            f">= d*d_out = {d * d_out}")
    q = budget // (heads * p + experts * d_out)
    if q < 1:
        raise ConfigError(
            f"budget {budget} < per-rank cost {heads * p + experts * d_out}; "
            f"solved Q would be 0 (need Q >= 1)")
    return q


def slots_per_expert(total_slots: int, experts: int) -> int:
    """Distribute a target total slot count over experts: max(floor(T/E), 1)."""
    if total_slots < 1 or experts < 1:
        raise ConfigError(f"need total_slots >= 1 and experts >= 1, got {total_slots}, {experts}")
    return max(total_slots // experts, 1)


@dataclass
class MammothConfig:
    d: int                      # input feature dim
    d_out: int                  # output feature dim
    heads: int
    partition_dim: int          # P, per-head width after projection
    experts: int
    slots: int                  # S, slots per expert
    q: int | None = None        # low-rank width; None -> budget solver
    share_phi_globally: bool = False

    def __post_init__(self):
        for name in ("d", "d_out", "heads", "partition_dim", "experts", "slots"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_out % self.heads != 0:
            raise ConfigError(f"d_out {self.d_out} not divisible by heads {self.heads}")
        if self.q is None:
            self.q = solve_q(self.d, self.d_out, self.partition_dim, self.heads, self.experts)
        elif self.q < 1:
            raise ConfigError(f"q must be >= 1, got {self.q}")

    @property
    def mid_dim(self) -> int:
        return self.partition_dim * self.heads

    @property
    def head_out(self) -> int:
        return self.d_out // self.heads

    @property
    def total_slots(self) -> int:
        return self.experts * self.slots


@dataclass
class RoutingRecord:
    """Dispatch weights exported for interpretability.

    per_head[h][j, i] is the weight of instance i in slot j of head h
    (slots are expert-major: slot j belongs to expert j // S).  Every row
    is a softmax over instances, so it sums to 1.
    """
    bag_id: str
    n: int
    slots: int = 1                                 # S, for slot -> expert mapping
    per_head: list = field(default_factory=list)   # H arrays, (E*S) x N
    head_mean: np.ndarray | None = None            # (E*S) x N

    def expert_assignments(self) -> np.ndarray:
        """Per-instance expert id by argmax head-averaged dispatch weight."""
        best_slot = self.head_mean.argmax(axis=0)
        return best_slot // self.slots


@dataclass
class SlotOutputs:
    pooled: list          # per head, (E*S) x P pooled slot embeddings
    transformed: ad.Tensor  # (E*S) x d_out concatenated expert outputs


def project_and_partition(x: ad.Tensor, w: ad.Tensor, heads: int, p: int):
    """x @ W^T (no bias, no nonlinearity), split into H P-wide blocks."""
    y = ad.matmul(x, ad.transpose(w))
    return [ad.slice_columns(y, h * p, (h + 1) * p) for h in range(heads)]


def route_and_pool(xh: ad.Tensor, prototypes: ad.Tensor):
    """Slot-wise softmax over instances and weighted pooling.

    Returns (alpha, u): alpha is (E*S) x N with rows summing to 1, and
    u = alpha @ xh.  Pooling reductions accumulate in float64 so instance
    order cannot perturb float32 outputs beyond an ulp.
    """
    if xh.shape[0] == 0:
        raise EmptyBagError("cannot route an empty bag (N = 0)")
    logits = ad.matmul(prototypes, ad.transpose(xh), accumulate_f64=True)
    alpha = ad.softmax(logits, axis=1)
    u = ad.matmul(alpha, xh, accumulate_f64=True)
    return alpha, u


def expert_transform(u: ad.Tensor, phi: ad.Tensor, w_low: ad.Tensor,
                     ln_gamma: ad.Tensor, ln_beta: ad.Tensor,
                     slots: int, training: bool = False, rng=None) -> ad.Tensor:
    """Low-rank expert stack for one head.

    Rows [k*S, (k+1)*S) of ``u`` belong to expert k and are mapped through
    LayerNorm(ReLU(W_low^(k) @ (Phi @ u))); Phi is shared across experts.
    ``w_low`` stacks the per-expert blocks row-wise: (E*head_out) x Q.
    """
    experts = u.shape[0] // slots
    head_out = w_low.shape[0] // experts
    projected = ad.matmul(u, ad.transpose(phi))          # (E*S) x Q
    outs = []
    for k in range(experts):
        uk = ad.slice_rows(projected, k * slots, (k + 1) * slots)
        wk = ad.slice_rows(w_low, k * head_out, (k + 1) * head_out)
        outs.append(ad.matmul(uk, ad.transpose(wk)))
    z = ad.relu(ad.concat_rows(outs))
    z = ad.layer_norm(z, ln_gamma, ln_beta)
    if training:
        z = ad.dropout(z, EXPERT_DROPOUT, training=True, rng=rng)
    return z


class MammothLayer:
    """Trainable state plus the forward pass described in the module docstring."""

    output_kind = "slot_set"

    def __init__(self, config: MammothConfig, rng=None, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        rng = rng or np.random.default_rng(0)
        c = config
        self.params: dict[str, ad.Tensor] = {}

        def param(name, data):
            t = ad.Tensor(np.asarray(data, dtype=dtype), requires_grad=True,
                          dtype=dtype, name=name)
            self.params[name] = t
            return t

        def kaiming(rows, cols):
            bound = np.sqrt(6.0 / cols)
            return rng.uniform(-bound, bound, size=(rows, cols))

        param("w", kaiming(c.mid_dim, c.d))
        if c.share_phi_globally:
            param("phi", kaiming(c.q, c.partition_dim))
        for h in range(c.heads):
            param(f"head{h}.prototypes",
                  rng.normal(0.0, 1.0 / np.sqrt(c.partition_dim),
                             size=(c.total_slots, c.partition_dim)))
            if not c.share_phi_globally:
                param(f"head{h}.phi", kaiming(c.q, c.partition_dim))
            param(f"head{h}.w_low", kaiming(c.experts * c.head_out, c.q))
            param(f"head{h}.ln_gamma", np.ones(c.head_out))
            param(f"head{h}.ln_beta", np.zeros(c.head_out))

    def _phi(self, h: int) -> ad.Tensor:
        return self.params["phi" if self.config.share_phi_globally else f"head{h}.phi"]

    def forward(self, x: ad.Tensor, training: bool = False, rng=None,
                record_routing: bool = False, bag_id: str = ""):
        """Run one bag; returns (slot_outputs, routing_record_or_None)."""
        c = self.config
        n = x.shape[0]
        if n == 0:
            raise EmptyBagError("cannot run forward on an empty bag (N = 0)")
        if x.shape[1] != c.d:
            raise ConfigError(f"input feature dim {x.shape[1]} != configured d {c.d}")
        if training:
            x = ad.dropout(x, INPUT_DROPOUT, training=True, rng=rng)
        partitions = project_and_partition(x, self.params["w"], c.heads, c.partition_dim)

        record = RoutingRecord(bag_id=bag_id, n=n, slots=c.slots) if record_routing else None
        pooled, head_outs = [], []
        for h in range(c.heads):
            alpha, u = route_and_pool(partitions[h], self.params[f"head{h}.prototypes"])
            if record is not None:
                record.per_head.append(alpha.data.copy())
            pooled.append(u)
            head_outs.append(expert_transform(
                u, self._phi(h), self.params[f"head{h}.w_low"],
                self.params[f"head{h}.ln_gamma"], self.params[f"head{h}.ln_beta"],
                c.slots, training=training, rng=rng))
        out = ad.concat_last_axis(head_outs)
        if record is not None:
            record.head_mean = np.mean(record.per_head, axis=0)
        return SlotOutputs(pooled=pooled, transformed=out), record

    def __call__(self, x, training=False, rng=None):
        return self.forward(x, training=training, rng=rng)[0].transformed

    def count_params(self) -> int:
        """Exact trainable scalar count over all parameter groups."""
        return int(sum(t.data.size for t in self.params.values()))

    def count_params_budget_relevant(self) -> int:
        """Count of just the terms the budget solver trades off (W, Phi, W_low)."""
        return int(sum(t.data.size for name, t in self.params.items()
                       if name in ("w", "phi") or name.endswith((".phi", ".w_low"))))


def mammoth_param_count(config: MammothConfig) -> dict:
    """Analytic parameter counts (no initialization needed)."""
    c = config
    w = c.mid_dim * c.d
    protos = c.heads * c.total_slots * c.partition_dim
    phi = (1 if c.share_phi_globally else c.heads) * c.q * c.partition_dim
    w_low = c.heads * c.experts * c.head_out * c.q
    affine = c.heads * 2 * c.head_out
    return {
        "w": w, "prototypes": protos, "phi": phi, "w_low": w_low, "ln_affine": affine,
        "total": w + protos + phi + w_low + affine,
        "budget_relevant": w + phi + w_low,
    }
