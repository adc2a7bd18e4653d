"""Baseline merging algorithms over adapter collections.

Weight-space mergers (ta, ties, dare_ties, knots_*) return merged full
weights per layer; factor-space mergers (linear, svd, lora_lego) return one
merged adapter per layer. All stochastic mergers draw from counter-based
streams keyed by (seed, task, layer), so results are independent of
evaluation order and bit-deterministic under a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .adapters import AdapterCollection, LoraAdapter, delta_weight
from .rng import substream

METHODS = (
    "ta",
    "ties",
    "dare_ties",
    "linear",
    "svd",
    "knots_ties",
    "knots_dare_ties",
    "lora_lego",
)


class MergeError(ValueError):
    pass


@dataclass
class MergeConfig:
    method: str
    lam: float = 0.3
    trim_fraction: float = 0.7
    drop_prob: float = 0.5
    k_clusters: int = 16
    lego_reweight: str = "output"
    rng_seed: int = 0
    target_rank: int = 16

    _RELEVANT = {
        "ta": {"lam"},
        "ties": {"lam", "trim_fraction"},
        "dare_ties": {"lam", "trim_fraction", "drop_prob", "rng_seed"},
        "linear": {"lam"},
        "svd": {"lam", "target_rank"},
        "knots_ties": {"lam", "trim_fraction"},
        "knots_dare_ties": {"lam", "trim_fraction", "drop_prob", "rng_seed"},
        "lora_lego": {"k_clusters", "lego_reweight", "rng_seed"},
    }

    def __post_init__(self):
        if self.method not in METHODS:
            raise MergeError(f"unknown merge method {self.method!r}")
        if not 0.0 <= self.trim_fraction < 1.0:
            raise MergeError("trim_fraction must be in [0, 1)")
        if not 0.0 <= self.drop_prob < 1.0:
            raise MergeError("drop_prob must be in [0, 1)")
        if self.k_clusters < 1:
            raise MergeError("k_clusters must be positive")
        if self.lego_reweight not in ("parameter", "output"):
            raise MergeError("lego_reweight must be 'parameter' or 'output'")

    @classmethod
    def from_dict(cls, payload: dict) -> "MergeConfig":
        if "method" not in payload:
            raise MergeError("merge config requires a 'method' key")
        method = payload["method"]
        if method not in cls._RELEVANT:
            raise MergeError(f"unknown merge method {method!r}")
        allowed = cls._RELEVANT[method] | {"method"}
        unknown = set(payload) - allowed
        if unknown:
            raise MergeError(
                f"parameters {sorted(unknown)} are not relevant to method {method!r}"
            )
        return cls(**payload)


def grid_configs(method: str, **param_lists) -> list[MergeConfig]:
    """Cartesian grid of MergeConfigs, e.g. grid_configs('ta', lam=[0.1, 0.2])."""
    configs = [{"method": method}]
    for name, values in param_lists.items():
        configs = [dict(c, **{name: v}) for c in configs for v in values]
    return [MergeConfig.from_dict(c) for c in configs]


def _layer_deltas(coll: AdapterCollection, layer: str) -> list[np.ndarray]:
    return [delta_weight(ad) for ad in coll.adapters[layer]]


def merge_ta(coll: AdapterCollection, lam: float = 0.3) -> dict[str, np.ndarray]:
    """W0 + lam * sum of task updates, per layer."""
    return {
        layer: coll.base[layer] + lam * sum(_layer_deltas(coll, layer))
        for layer in coll.layer_ids
    }


def _trim_top_mass(delta: np.ndarray, trim_fraction: float) -> np.ndarray:
    """Keep exactly the top (1 - trim_fraction) fraction of entries by |value|."""
    flat = delta.ravel()
    n_keep = int(np.ceil((1.0 - trim_fraction) * flat.size))
    if n_keep >= flat.size:
        return delta.copy()
    order = np.argsort(-np.abs(flat), kind="stable")
    out = np.zeros_like(flat)
    keep = order[:n_keep]
    out[keep] = flat[keep]
    return out.reshape(delta.shape)


def _ties_combine(deltas: list[np.ndarray], trim_fraction: float) -> np.ndarray:
    """Trim per task, elect signs by summed magnitude, average matching survivors."""
    trimmed = np.stack([_trim_top_mass(d, trim_fraction) for d in deltas])
    pos_mass = np.sum(np.where(trimmed > 0, trimmed, 0.0), axis=0)
    neg_mass = np.sum(np.where(trimmed < 0, -trimmed, 0.0), axis=0)
    sign = np.where(pos_mass >= neg_mass, 1.0, -1.0)  # ties break positive
    match = (trimmed * sign) > 0
    count = np.sum(match, axis=0)
    total = np.sum(np.where(match, trimmed, 0.0), axis=0)
    return np.where(count > 0, total / np.maximum(count, 1), 0.0)


def merge_ties(
    coll: AdapterCollection, lam: float = 1.0, trim_fraction: float = 0.7
) -> dict[str, np.ndarray]:
    return {
        layer: coll.base[layer] + lam * _ties_combine(_layer_deltas(coll, layer), trim_fraction)
        for layer in coll.layer_ids
    }


def _dare_drop(delta: np.ndarray, p: float, seed: int, task: str, layer: str) -> np.ndarray:
    """Zero entries with probability p and rescale survivors by 1/(1-p)."""
    if p == 0.0:
        return delta
    u = substream(seed, "dare", task, layer).random(delta.shape)
    return np.where(u >= p, delta / (1.0 - p), 0.0)


def merge_dare_ties(
    coll: AdapterCollection,
    lam: float = 1.0,
    trim_fraction: float = 0.7,
    p: float = 0.5,
    seed: int = 0,
) -> dict[str, np.ndarray]:
    merged = {}
    for layer in coll.layer_ids:
        dropped = [
            _dare_drop(delta_weight(ad), p, seed, ad.task_id, layer)
            for ad in coll.adapters[layer]
        ]
        merged[layer] = coll.base[layer] + lam * _ties_combine(dropped, trim_fraction)
    return merged


def _require_uniform(adapters: list[LoraAdapter], what: str) -> tuple[int, float]:
    ranks = {ad.rank for ad in adapters}
    alphas = {ad.lora_alpha for ad in adapters}
    if len(ranks) != 1 or len(alphas) != 1:
        raise MergeError(f"{what} requires uniform rank and lora_alpha across tasks")
    return ranks.pop(), alphas.pop()


def merge_linear(coll: AdapterCollection, lam: float = 0.3) -> dict[str, LoraAdapter]:
    """Sum factors instead of updates: B = lam * sum B_i, A = sum A_i.

    lam multiplies only the B sum so it enters the update once.
    """
    merged = {}
    for layer in coll.layer_ids:
        ads = coll.adapters[layer]
        rank, alpha = _require_uniform(ads, "linear merge")
        b = lam * sum(ad.b for ad in ads)
        a = sum(ad.a for ad in ads)
        merged[layer] = LoraAdapter(
            task_id="__merged__", layer_id=layer, b=b, a=a, rank=rank, lora_alpha=alpha
        )
    return merged


def merge_svd(
    coll: AdapterCollection, lam: float = 0.3, target_rank: int = 16
) -> dict[str, LoraAdapter]:
    """Truncated SVD of the scaled update sum, refactored as a rank-r adapter."""
    merged = {}
    for layer in coll.layer_ids:
        total = lam * sum(_layer_deltas(coll, layer))
        d, m = total.shape
        if target_rank > min(d, m):
            raise MergeError(f"target_rank {target_rank} exceeds min{d, m}")
        res = linalg.svd(total)
        b = res.u[:, :target_rank] * res.sigma[:target_rank]
        a = res.v[:, :target_rank]
        # lora_alpha = rank so the stored factors reproduce the truncation exactly
        merged[layer] = LoraAdapter(
            task_id="__merged__",
            layer_id=layer,
            b=b,
            a=a,
            rank=target_rank,
            lora_alpha=float(target_rank),
        )
    return merged


def merge_knots(
    coll: AdapterCollection,
    lam: float = 1.0,
    inner: str = "ties",
    trim_fraction: float = 0.7,
    p: float = 0.5,
    seed: int = 0,
) -> dict[str, np.ndarray]:
    """Shared-basis merge: SVD of row-concatenated updates, inner merge of
    per-task coefficient blocks U_i Sigma, reconstruction against V^T."""
    if inner not in ("ties", "dare_ties"):
        raise MergeError(f"unknown inner merger {inner!r}")
    merged = {}
    for layer in coll.layer_ids:
        deltas = _layer_deltas(coll, layer)
        stacked = np.vstack(deltas)                       # (N*d, m)
        res = linalg.svd(stacked)
        d = deltas[0].shape[0]
        blocks = [
            res.u[i * d : (i + 1) * d, :] * res.sigma     # U_i Sigma, (d, q)
            for i in range(len(deltas))
        ]
        if inner == "dare_ties":
            blocks = [
                _dare_drop(blk, p, seed, coll.task_ids[i], layer)
                for i, blk in enumerate(blocks)
            ]
        combined = _ties_combine(blocks, trim_fraction)
        merged[layer] = coll.base[layer] + lam * (combined @ res.v.T)
    return merged


def _kmeans(points: np.ndarray, k: int, rng: np.random.Generator):
    """Seeded k-means++ with deterministic empty-cluster reseeding."""
    n = points.shape[0]
    # k-means++ initialization
    centroids = [points[int(rng.integers(n))]]
    for _ in range(1, k):
        d2 = np.min(
            np.stack([np.sum((points - c) ** 2, axis=1) for c in centroids]), axis=0
        )
        total = float(np.sum(d2))
        if total <= 0.0:
            centroids.append(points[int(rng.integers(n))])
            continue
        r = rng.random() * total
        idx = int(np.searchsorted(np.cumsum(d2), r))
        centroids.append(points[min(idx, n - 1)])
    centers = np.stack(centroids)

    prev_inertia = np.inf
    assign = np.zeros(n, dtype=int)
    for _ in range(100):
        dists = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        assign = np.argmin(dists, axis=1)
        inertia = float(np.sum(dists[np.arange(n), assign]))
        for c in range(k):
            members = points[assign == c]
            if len(members) == 0:
                # reseed from the point farthest from its centroid (lowest index on ties)
                far = int(np.argmax(dists[np.arange(n), assign]))
                centers[c] = points[far]
                assign[far] = c
            else:
                centers[c] = members.mean(axis=0)
        if prev_inertia < np.inf and abs(prev_inertia - inertia) <= 1e-8 * max(
            prev_inertia, 1e-300
        ):
            break
        prev_inertia = inertia
    return centers, assign


def merge_lora_lego(
    coll: AdapterCollection,
    k_clusters: int = 16,
    reweight: str = "output",
    seed: int = 0,
) -> dict[str, LoraAdapter]:
    """Cluster minimal semantic units [a_j; b_j] pooled across tasks; centroids
    form a rank-k adapter with the chosen reweighting."""
    if reweight not in ("parameter", "output"):
        raise MergeError("reweight must be 'parameter' or 'output'")
    merged = {}
    for layer in coll.layer_ids:
        ads = coll.adapters[layer]
        rank, alpha = _require_uniform(ads, "lora_lego")
        m = ads[0].a.shape[0]
        units = np.stack(
            [
                np.concatenate([ad.a[:, j], ad.b[:, j]])
                for ad in ads
                for j in range(ad.rank)
            ]
        )
        if k_clusters > units.shape[0]:
            raise MergeError(
                f"k_clusters {k_clusters} exceeds unit count {units.shape[0]}"
            )
        centers, assign = _kmeans(units, k_clusters, substream(seed, "lego", layer))

        if reweight == "parameter":
            norms = np.linalg.norm(units, axis=1)
            for c in range(k_clusters):
                member_mean = float(np.mean(norms[assign == c]))
                cnorm = float(np.linalg.norm(centers[c]))
                if cnorm > 0:
                    centers[c] *= member_mean / cnorm
        a = centers[:, :m].T
        b = centers[:, m:].T
        if reweight == "output":
            b = b * np.sqrt(rank / k_clusters)
        # keep the per-direction training scale alpha/rank constant under the new rank
        merged[layer] = LoraAdapter(
            task_id="__merged__",
            layer_id=layer,
            b=b,
            a=a,
            rank=k_clusters,
            lora_alpha=alpha * k_clusters / rank,
        )
    return merged


def adapters_to_weights(
    coll: AdapterCollection, merged: dict[str, LoraAdapter]
) -> dict[str, np.ndarray]:
    """Fold per-layer merged adapters into full weights on the collection's base."""
    return {
        layer: coll.base[layer] + delta_weight(merged[layer])
        for layer in coll.layer_ids
    }


def run_merge(coll: AdapterCollection, cfg: MergeConfig) -> dict[str, np.ndarray]:
    """Dispatch a MergeConfig to the corresponding merger, returning full weights."""
    if cfg.method == "ta":
        return merge_ta(coll, cfg.lam)
    if cfg.method == "ties":
        return merge_ties(coll, cfg.lam, cfg.trim_fraction)
    if cfg.method == "dare_ties":
        return merge_dare_ties(coll, cfg.lam, cfg.trim_fraction, cfg.drop_prob, cfg.rng_seed)
    if cfg.method == "linear":
        return adapters_to_weights(coll, merge_linear(coll, cfg.lam))
    if cfg.method == "svd":
        return adapters_to_weights(coll, merge_svd(coll, cfg.lam, cfg.target_rank))
    if cfg.method == "knots_ties":
        return merge_knots(coll, cfg.lam, "ties", cfg.trim_fraction)
    if cfg.method == "knots_dare_ties":
        return merge_knots(
            coll, cfg.lam, "dare_ties", cfg.trim_fraction, cfg.drop_prob, cfg.rng_seed
        )
    if cfg.method == "lora_lego":
        return adapters_to_weights(
            coll, merge_lora_lego(coll, cfg.k_clusters, cfg.lego_reweight, cfg.rng_seed)
        )
    raise MergeError(f"unknown merge method {cfg.method!r}")
