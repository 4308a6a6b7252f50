"""Bag classifier: task-specific layer + aggregation head + loss."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .aggregators import Aggregator
from .baselines import (LinearLayer, SoftMoELayer, SparseMoELayer,
                        SparseMultiheadLayer)
from .errors import ConfigError
from .layer import MammothConfig, MammothLayer

LAYER_CHOICES = ("linear", "mammoth", "soft", "sparse_softmax",
                 "sparse_sinkhorn", "sparse_mh")
AGG_CHOICES = ("mean", "max", "abmil")


def build_layer(variant: str, d: int, d_out: int, rng, *, heads=4,
                partition_dim=8, experts=None, slots=3, q=None,
                total_slots=None, topk=2, sinkhorn_iters=3, mh_heads=None,
                dtype=np.float32):
    """Construct one task-specific layer by variant tag."""
    if variant == "linear":
        return LinearLayer(d, d_out, rng=rng, dtype=dtype)
    if variant == "mammoth":
        cfg = MammothConfig(d=d, d_out=d_out, heads=heads, partition_dim=partition_dim,
                            experts=experts if experts is not None else 30,
                            slots=slots, q=q)
        return MammothLayer(cfg, rng=rng, dtype=dtype)
    if variant == "soft":
        kw = {} if total_slots is None else {"total_slots": total_slots}
        if experts is not None:
            kw["experts"] = experts
        return SoftMoELayer(d, d_out, rng=rng, dtype=dtype, **kw)
    if variant in ("sparse_softmax", "sparse_sinkhorn"):
        return SparseMoELayer(d, d_out, experts=experts if experts is not None else 5,
                              k=topk, gate=variant.split("_")[1],
                              sinkhorn_iters=sinkhorn_iters, rng=rng, dtype=dtype)
    if variant == "sparse_mh":
        return SparseMultiheadLayer(d, d_out, heads=mh_heads if mh_heads else 16,
                                    experts=experts if experts is not None else 5,
                                    k=topk, rng=rng, dtype=dtype)
    raise ConfigError(f"unknown layer variant {variant!r} (choices: {LAYER_CHOICES})")


class BagClassifier:
    """layer -> aggregator -> bias-free linear head, trained with CE loss."""

    def __init__(self, layer, aggregator: Aggregator, variant: str):
        self.layer = layer
        self.aggregator = aggregator
        self.variant = variant

    @property
    def params(self) -> dict[str, ad.Tensor]:
        named = {f"layer.{k}": v for k, v in self.layer.params.items()}
        named.update({f"agg.{k}": v for k, v in self.aggregator.params.items()})
        return named

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    def logits(self, features: np.ndarray, training=False, rng=None,
               record_routing=False, bag_id=""):
        """Forward one bag; returns (1 x C logits, routing-or-None)."""
        x = ad.Tensor(np.asarray(features, dtype=self.layer.dtype))
        routing = None
        if isinstance(self.layer, MammothLayer):
            out, routing = self.layer.forward(x, training=training, rng=rng,
                                              record_routing=record_routing,
                                              bag_id=bag_id)
            z = out.transformed
        else:
            z = self.layer.forward(x, training=training, rng=rng)
        logits, _ = self.aggregator.forward(z)
        return logits, routing

    def loss(self, features: np.ndarray, label: int, training=True, rng=None):
        logits, _ = self.logits(features, training=training, rng=rng)
        return ad.cross_entropy_with_logits(logits, label)

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            logits, _ = self.logits(features, training=False)
            probs = ad.softmax(logits, axis=1)
        return probs.data.reshape(-1)


def build_model(variant: str, agg: str, d: int, d_out: int, num_classes: int,
                rng, abmil_dim=256, dtype=np.float32, **layer_kw) -> BagClassifier:
    layer = build_layer(variant, d, d_out, rng, dtype=dtype, **layer_kw)
    aggregator = Aggregator(agg, d_out, num_classes, attn_dim=abmil_dim,
                            rng=rng, dtype=dtype)
    return BagClassifier(layer, aggregator, variant)
