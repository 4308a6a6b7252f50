"""Efficiency accounting: analytic MAC counts, wall-clock latency, parameter
comparison, and a working-set estimate for each layer variant.

Counting conventions (documented because published FLOP tables rarely
agree on them):

  * one MAC = one reported FLOP; the dense layer at 10,000 x 1024 -> 512
    then counts 5,242,880,000, matching how such tables report ~5.3 G.
  * every matrix product in the forward pass is counted, including
    routing-logit and weighted-pooling products; elementwise ops
    (ReLU, softmax normalizers, Sinkhorn rescaling) are excluded.
  * sparse dispatch is counted at full top-k assignment (k expert passes
    per token, no capacity drops), keeping the count a deterministic
    function of config and shape rather than of the data.
  * N = 0 counts 0 (no instances, nothing runs).

Latency is measured on fresh random inputs per trial with a monotonic
clock around the forward pass only; warmup trials are discarded.  BLAS
threading is pinned to one thread unless ``parallel=True``.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .baselines import multihead_hidden_dim
from .layer import MammothConfig, mammoth_param_count, slots_per_expert
from .model import build_layer

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - present in this environment
    threadpool_limits = None

VARIANTS = ("linear", "mammoth", "soft", "sparse_softmax", "sparse_sinkhorn",
            "sparse_mh")


@dataclass
class BenchResult:
    variant: str
    n: int
    d: int
    d_out: int
    macs: int
    latency_ms_mean: float | None
    latency_ms_std: float | None
    params: int
    peak_bytes: int

    def to_dict(self):
        return asdict(self)


def _mammoth_cfg(d, d_out, heads, partition_dim, experts, slots, q=None):
    return MammothConfig(d=d, d_out=d_out, heads=heads, partition_dim=partition_dim,
                         experts=experts, slots=slots, q=q)


def count_macs(variant: str, n: int, d: int, d_out: int, *, heads=16,
               partition_dim=16, experts=None, slots=9, q=None,
               total_slots=None, topk=2, mh_heads=16, sinkhorn_iters=3) -> int:
    """Analytic multiply-accumulate count of one forward pass."""
    if n == 0:
        return 0
    if variant == "linear":
        return n * d * d_out
    if variant == "mammoth":
        cfg = _mammoth_cfg(d, d_out, heads, partition_dim,
                           experts if experts is not None else 30, slots, q)
        s_tot = cfg.total_slots
        project = n * d * cfg.mid_dim
        routing = cfg.heads * s_tot * n * cfg.partition_dim   # logits
        pooling = cfg.heads * s_tot * n * cfg.partition_dim   # weighted average
        expert = cfg.heads * s_tot * cfg.q * (cfg.partition_dim + cfg.head_out)
        return project + routing + pooling + expert
    if variant == "soft":
        e = experts if experts is not None else 5
        s_tot = e * slots_per_expert(total_slots if total_slots else 200, e)
        return (s_tot * n * d            # routing logits
                + s_tot * n * d          # dispatch pooling
                + s_tot * d * d_out      # expert transforms
                + n * s_tot * d_out)     # per-instance combine
    if variant in ("sparse_softmax", "sparse_sinkhorn"):
        e = experts if experts is not None else 5
        return n * d * e + n * topk * d * d_out
    if variant == "sparse_mh":
        e = experts if experts is not None else 5
        hidden = multihead_hidden_dim(d, d_out, mh_heads)
        return n * d * e + n * topk * hidden * (d + d_out)
    raise ValueError(f"unknown variant {variant!r}")


def peak_bytes(variant: str, n: int, d: int, d_out: int, *, heads=16,
               partition_dim=16, experts=None, slots=9, q=None,
               total_slots=None, topk=2, mh_heads=16, sinkhorn_iters=3) -> int:
    """Forward working-set estimate: parameters plus the widest set of
    simultaneously live float32 activations (input included)."""
    f = 4  # float32 bytes
    params = compare_params([variant], d, d_out, heads=heads,
                            partition_dim=partition_dim, experts=experts,
                            slots=slots, q=q, total_slots=total_slots,
                            mh_heads=mh_heads)[0]["params"]
    if n == 0:
        return f * params
    live = n * d  # input
    if variant == "linear":
        live += n * d_out
    elif variant == "mammoth":
        cfg = _mammoth_cfg(d, d_out, heads, partition_dim,
                           experts if experts is not None else 30, slots, q)
        s_tot = cfg.total_slots
        # projected features + one head's logits/alpha/pooled + slot output
        live += (n * cfg.mid_dim + 2 * s_tot * n + s_tot * cfg.partition_dim
                 + s_tot * d_out)
    elif variant == "soft":
        e = experts if experts is not None else 5
        s_tot = e * slots_per_expert(total_slots if total_slots else 200, e)
        live += 2 * s_tot * n + s_tot * d + s_tot * d_out + n * d_out
    elif variant in ("sparse_softmax", "sparse_sinkhorn"):
        e = experts if experts is not None else 5
        live += n * e + 2 * n * d_out
    elif variant == "sparse_mh":
        e = experts if experts is not None else 5
        hidden = multihead_hidden_dim(d, d_out, mh_heads)
        live += n * mh_heads * e + n * topk * hidden + 2 * n * d_out
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return f * (params + live)


def compare_params(variants, d: int, d_out: int, *, heads=16, partition_dim=16,
                   experts=None, slots=9, q=None, total_slots=None,
                   mh_heads=16, topk=2, sinkhorn_iters=3) -> list:
    """Exact per-variant parameter counts; flags any above the linear budget."""
    budget = d * d_out
    rows = []
    for variant in variants:
        if variant == "linear":
            count = d * d_out
        elif variant == "mammoth":
            cfg = _mammoth_cfg(d, d_out, heads, partition_dim,
                               experts if experts is not None else 30, slots, q)
            count = mammoth_param_count(cfg)["total"]
        elif variant == "soft":
            e = experts if experts is not None else 5
            s_tot = e * slots_per_expert(total_slots if total_slots else 200, e)
            count = e * d * d_out + s_tot * d
        elif variant in ("sparse_softmax", "sparse_sinkhorn"):
            e = experts if experts is not None else 5
            count = e * d * d_out + e * d
        elif variant == "sparse_mh":
            e = experts if experts is not None else 5
            hidden = multihead_hidden_dim(d, d_out, mh_heads)
            count = e * hidden * (d + d_out) // mh_heads + e * d // mh_heads
        else:
            raise ValueError(f"unknown variant {variant!r}")
        rows.append({"variant": variant, "params": int(count),
                     "exceeds_linear_budget": bool(count > budget)})
    return rows


def mammoth_params_across_experts(d: int, d_out: int, expert_counts,
                                  heads=16, partition_dim=16,
                                  total_slots=270) -> list:
    """Parameter counts across expert counts, re-solving Q and keeping the
    total slot count roughly fixed (S = max(floor(T/E), 1))."""
    rows = []
    for e in expert_counts:
        cfg = _mammoth_cfg(d, d_out, heads, partition_dim, e,
                           slots_per_expert(total_slots, e))
        counts = mammoth_param_count(cfg)
        rows.append({"experts": e, "slots": cfg.slots, "q": cfg.q,
                     "params": counts["total"],
                     "budget_relevant": counts["budget_relevant"]})
    return rows


def measure_latency(variant: str, n: int, d: int, d_out: int, trials: int = 1000,
                    warmup: int = 50, rng=None, parallel: bool = False,
                    **layer_kw):
    """Mean/std forward latency in ms over fresh random inputs."""
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    rng = rng or np.random.default_rng(0)
    layer = build_layer(variant, d, d_out, np.random.default_rng(0), **layer_kw)

    def run_trials():
        times = []
        for trial in range(warmup + trials):
            x = ad.Tensor(rng.standard_normal((n, d)).astype(np.float32))
            t0 = time.perf_counter()
            with ad.no_grad():
                layer.forward(x)
            elapsed = (time.perf_counter() - t0) * 1e3
            if trial >= warmup:
                times.append(elapsed)
        return np.asarray(times)

    if parallel or threadpool_limits is None:
        times = run_trials()
    else:
        with threadpool_limits(limits=1):
            times = run_trials()
    return float(times.mean()), float(times.std())


def run_bench(variants, n: int, d: int, d_out: int, trials: int, warmup: int,
              rng=None, parallel: bool = False, measure: bool = True,
              **layer_kw) -> list:
    results = []
    for variant in variants:
        macs = count_macs(variant, n, d, d_out, **layer_kw)
        params = compare_params([variant], d, d_out, **layer_kw)[0]["params"]
        mean = std = None
        if measure:
            mean, std = measure_latency(variant, n, d, d_out, trials=trials,
                                        warmup=warmup, rng=rng,
                                        parallel=parallel, **layer_kw)
        results.append(BenchResult(
            variant=variant, n=n, d=d, d_out=d_out, macs=macs,
            latency_ms_mean=mean, latency_ms_std=std, params=params,
            peak_bytes=peak_bytes(variant, n, d, d_out, **layer_kw)))
    return results


def write_bench_csv(results, path):
    tmp = str(path) + ".tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "N", "D", "D_out", "macs",
                         "latency_ms_mean", "latency_ms_std", "params",
                         "peak_bytes"])
        for r in results:
            writer.writerow([
                r.variant, r.n, r.d, r.d_out, r.macs,
                "" if r.latency_ms_mean is None else f"{r.latency_ms_mean:.6f}",
                "" if r.latency_ms_std is None else f"{r.latency_ms_std:.6f}",
                r.params, r.peak_bytes])
    os.replace(tmp, path)
