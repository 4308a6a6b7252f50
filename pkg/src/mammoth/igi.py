"""Instance gradient interference analysis.

For each bag, instances are k-means-clustered on their raw features and a
capped sample per cluster is drawn.  Each sampled instance gets a
gradient vector: the gradient of a per-instance surrogate loss (cross
entropy of the bag label against the model run on that instance alone)
with respect to a selected weight group, captured at fixed parameters.

Cluster mode compares mean cosine similarity of same-cluster gradient
pairs against different-cluster pairs (one-sided Welch t-test for
intra > inter).  Expert mode routes each instance to its argmax-dispatch
expert and measures similarity among instances sharing an expert,
against the single-expert baseline where every pair shares the one
expert layer.

The surrogate loss is a documented choice: it makes "the gradient of one
instance" well-defined for every aggregator by restricting the bag to
that instance.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
from scipy import stats

from .layer import MammothLayer
from .metrics import kmeans

DEFAULT_CLUSTERS = 8
DEFAULT_PER_CLUSTER = 100


@dataclass
class IGIReport:
    selector: str
    intra_mean: float | None
    inter_mean: float | None
    t_statistic: float | None
    p_value: float | None
    n_intra: int
    n_inter: int
    overall_mean: float | None = None        # mean over all sampled pairs
    within_expert_mean: float | None = None  # expert mode only
    per_expert_mean: dict | None = None
    utilization_entropy: float | None = None
    n_within_expert: int = 0

    def to_dict(self):
        return asdict(self)


def selected_param_names(model, selector: str):
    """Weight group the gradients are taken with respect to."""
    if selector == "linear":
        return ["layer.w"]
    if selector in ("single_expert", "per_expert"):
        if not isinstance(model.layer, MammothLayer):
            raise ValueError(f"selector {selector!r} needs a mammoth layer")
        return [n for n in model.params if n.endswith(".w_low")]
    raise ValueError(f"unknown layer selector {selector!r}")


def _instance_gradient(model, features_row, label, names):
    model.zero_grad()
    loss = model.loss(features_row, label, training=False)
    loss.backward()
    return {n: model.params[n].grad.copy() for n in names}


def _flatten(grads: dict, names) -> np.ndarray:
    return np.concatenate([grads[n].reshape(-1) for n in names])


def _expert_slice(grads: dict, names, expert: int, head_out: int) -> np.ndarray:
    """Rows of each head's stacked W_low belonging to one expert."""
    return np.concatenate([
        grads[n][expert * head_out:(expert + 1) * head_out].reshape(-1)
        for n in names])


def _cosine_matrix(g: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    gn = g / norms
    return np.clip(gn @ gn.T, -1.0, 1.0)


def _pair_sims(sims: np.ndarray, groups: np.ndarray):
    """(same-group similarities, cross-group similarities) over i < j."""
    iu = np.triu_indices(sims.shape[0], 1)
    same = groups[iu[0]] == groups[iu[1]]
    vals = sims[iu]
    return vals[same], vals[~same]


def _sample_instances(bag, k, per_cluster, rng):
    assign, _ = kmeans(bag.features, k, rng=rng)
    chosen, chosen_clusters = [], []
    for c in range(k):
        members = np.nonzero(assign == c)[0]
        if members.size == 0:
            continue
        take = min(per_cluster, members.size)
        picked = rng.choice(members, size=take, replace=False)
        chosen.extend(int(i) for i in picked)
        chosen_clusters.extend([c] * take)
    clusters = np.asarray(chosen_clusters)
    counts = np.bincount(clusters, minlength=k)
    if (counts >= 2).sum() < 2:
        raise ValueError(
            f"need at least 2 clusters with >= 2 sampled instances, "
            f"got sizes {counts.tolist()}")
    return np.asarray(chosen), clusters


def igi_protocol(model, bags, selector: str, k: int = DEFAULT_CLUSTERS,
                 per_cluster: int = DEFAULT_PER_CLUSTER, rng=None,
                 pair_rows: list | None = None) -> IGIReport:
    """Run the full protocol over a list of bags at fixed model parameters.

    When ``pair_rows`` is a list, every pairwise similarity is appended to
    it as (bag_id, kind, similarity) for the optional CSV dump.
    """
    rng = rng or np.random.default_rng(0)
    names = selected_param_names(model, selector)
    expert_mode = selector == "per_expert"
    experts = model.layer.config.experts if expert_mode else 1
    head_out = model.layer.config.head_out if expert_mode else 0

    intra_all, inter_all, within_expert = [], [], {e: [] for e in range(experts)}
    assignment_counts = np.zeros(experts, dtype=np.int64)

    def record_pairs(bag_id, kind, values):
        if pair_rows is not None:
            pair_rows.extend((bag_id, kind, float(v)) for v in values)

    for bag in bags:
        idx, clusters = _sample_instances(bag, k, per_cluster, rng)
        grad_rows = []
        for i in idx:
            grads = _instance_gradient(model, bag.features[i:i + 1], bag.label, names)
            grad_rows.append(grads)
        flat = np.stack([_flatten(g, names) for g in grad_rows])
        sims = _cosine_matrix(flat)
        same, cross = _pair_sims(sims, clusters)
        intra_all.extend(same.tolist())
        inter_all.extend(cross.tolist())
        record_pairs(bag.bag_id, "intra", same)
        record_pairs(bag.bag_id, "inter", cross)

        if expert_mode:
            _, record = model.layer.forward(
                _as_tensor(bag.features, model.layer.dtype), record_routing=True)
            routed = record.expert_assignments()[idx]
            np.add.at(assignment_counts, routed, 1)
            for e in range(experts):
                members = np.nonzero(routed == e)[0]
                if members.size < 2:
                    continue
                ge = np.stack([_expert_slice(grad_rows[m], names, e, head_out)
                               for m in members])
                esims = _cosine_matrix(ge)
                vals, _ = _pair_sims(esims, np.zeros(members.size))
                within_expert[e].extend(vals.tolist())
                record_pairs(bag.bag_id, f"within_expert_{e}", vals)

    intra = np.asarray(intra_all)
    inter = np.asarray(inter_all)
    t_stat = p_val = None
    if intra.size >= 2 and inter.size >= 2:
        t_stat, p_val = stats.ttest_ind(intra, inter, equal_var=False,
                                        alternative="greater")
        t_stat, p_val = float(t_stat), float(p_val)

    report = IGIReport(
        selector=selector,
        intra_mean=float(intra.mean()) if intra.size else None,
        inter_mean=float(inter.mean()) if inter.size else None,
        t_statistic=t_stat, p_value=p_val,
        n_intra=int(intra.size), n_inter=int(inter.size),
        overall_mean=float(np.concatenate([intra, inter]).mean())
        if intra.size + inter.size else None,
    )
    if expert_mode:
        pooled = [v for vals in within_expert.values() for v in vals]
        report.within_expert_mean = float(np.mean(pooled)) if pooled else None
        report.per_expert_mean = {e: float(np.mean(v))
                                  for e, v in within_expert.items() if v}
        report.n_within_expert = len(pooled)
        report.utilization_entropy = utilization_entropy(assignment_counts)
    return report


def utilization_entropy(counts: np.ndarray) -> float:
    """Shannon entropy (nats) of the argmax expert assignment distribution."""
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def _as_tensor(features, dtype):
    from . import autodiff as ad
    return ad.Tensor(np.asarray(features, dtype=dtype))
