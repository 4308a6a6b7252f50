"""Bag-level aggregation heads: mean pooling, max pooling, gated attention.

Each aggregator turns an M x D_out embedding set (per-instance or slot
set) into C class logits via a bias-free C x D_out classifier matrix.
All three are permutation-invariant over the M rows.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import EmptyBagError

ABMIL_HIDDEN = 256


def _check_rows(z):
    if z.shape[0] == 0:
        raise EmptyBagError("cannot aggregate an empty embedding set (M = 0)")


def mean_pool_classify(z: ad.Tensor, head: ad.Tensor) -> ad.Tensor:
    """logits = head @ mean of the rows of z; returns a 1 x C row."""
    _check_rows(z)
    return ad.matmul(ad.mean_rows(z), ad.transpose(head))


def max_pool_classify(z: ad.Tensor, head: ad.Tensor) -> ad.Tensor:
    """Logits of the row whose largest class logit is globally largest.

    Ties pick the lowest row index; backward flows only through the
    selected row.
    """
    _check_rows(z)
    logits = ad.matmul(z, ad.transpose(head))        # M x C
    row = int(logits.data.max(axis=1).argmax())      # argmax takes lowest index
    return ad.slice_rows(logits, row, row + 1)


def abmil_classify(z: ad.Tensor, v: ad.Tensor, u: ad.Tensor, w: ad.Tensor,
                   head: ad.Tensor):
    """Gated-attention pooling: a_m ∝ exp(w^T(tanh(Vz_m) ⊙ sigmoid(Uz_m))).

    Returns (1 x C logits, attention weights over the M rows).
    """
    _check_rows(z)
    gate = ad.mul(ad.tanh(ad.matmul(z, ad.transpose(v))),
                  ad.sigmoid(ad.matmul(z, ad.transpose(u))))   # M x L
    scores = ad.matmul(gate, ad.transpose(w))                  # M x 1
    attn = ad.softmax(scores, axis=0)
    pooled = ad.matmul(ad.transpose(attn), z, accumulate_f64=True)  # 1 x D_out
    return ad.matmul(pooled, ad.transpose(head)), attn


class Aggregator:
    """Aggregation head with its trainable parameters (if any)."""

    def __init__(self, kind: str, embed_dim: int, num_classes: int,
                 attn_dim: int = ABMIL_HIDDEN, rng=None, dtype=np.float32):
        if kind not in ("mean", "max", "abmil"):
            raise ValueError(f"unknown aggregator {kind!r}")
        if num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {num_classes}")
        rng = rng or np.random.default_rng(0)
        self.kind = kind
        self.num_classes = num_classes
        self.params: dict[str, ad.Tensor] = {}

        def kaiming(rows, cols):
            bound = np.sqrt(6.0 / cols)
            return rng.uniform(-bound, bound, size=(rows, cols))

        def param(name, data):
            self.params[name] = ad.Tensor(np.asarray(data, dtype=dtype),
                                          requires_grad=True, dtype=dtype, name=name)

        param("head", kaiming(num_classes, embed_dim))
        if kind == "abmil":
            param("attn_v", kaiming(attn_dim, embed_dim))
            param("attn_u", kaiming(attn_dim, embed_dim))
            param("attn_w", kaiming(1, attn_dim))

    def forward(self, z: ad.Tensor):
        """Returns (1 x C logits, attention-or-None)."""
        if self.kind == "mean":
            return mean_pool_classify(z, self.params["head"]), None
        if self.kind == "max":
            return max_pool_classify(z, self.params["head"]), None
        logits, attn = abmil_classify(z, self.params["attn_v"], self.params["attn_u"],
                                      self.params["attn_w"], self.params["head"])
        return logits, attn
