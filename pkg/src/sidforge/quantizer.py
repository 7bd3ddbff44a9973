"""Exposure-balanced residual quantization.

Hierarchical codebooks are fit layer by layer.  Each layer runs Lloyd
iterations whose nearest-centroid assignment step is followed by a repair
pass: clusters whose total exposure load exceeds ``tau`` times the mean
load per cluster evict their worst-fitting members into the nearest
under-capacity cluster, so no codebook entry monopolizes traffic.  With
``tau=None`` (unbounded) the repair pass never fires and the procedure
reduces to plain residual K-means.

Determinism: assignment ties break toward the lowest cluster index, the
repair pass is sequential, and items are processed in item_id order, so
codes are invariant under permutation of the input corpus for a fixed
seed (single-threaded).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np


class CapacityError(ValueError):
    """Strict-mode capacity repair failed; the message names the culprit."""


@dataclass
class CapacityViolation:
    layer: int
    cluster: int
    reason: str  # "overweight_item" | "no_feasible_target" | "residual_overload"
    item_index: int | None = None
    excess: float = 0.0


@dataclass
class Codebook:
    layers: list  # L arrays of shape (K, d_emb)
    K: int
    L: int
    tau: float | None  # None = unbounded
    c_cap_per_layer: list

    def __post_init__(self):
        if self.tau is not None and self.tau < 1.0:
            raise ValueError("tau must be >= 1")
        if len(self.layers) != self.L:
            raise ValueError("layer count mismatch")
        for l, tab in enumerate(self.layers):
            if tab.shape[0] != self.K:
                raise ValueError(f"layer {l} has {tab.shape[0]} centroids, expected {self.K}")

    def __eq__(self, other):
        if not isinstance(other, Codebook):
            return NotImplemented
        return (
            self.K == other.K
            and self.L == other.L
            and self.tau == other.tau
            and self.c_cap_per_layer == other.c_cap_per_layer
            and all(np.array_equal(a, b) for a, b in zip(self.layers, other.layers))
        )


@dataclass(frozen=True)
class SemanticId:
    item_id: int
    codes: tuple

    def prefix(self, depth: int) -> tuple:
        return self.codes[:depth]


@dataclass
class LayerResult:
    assignments: np.ndarray  # (N,) int
    centroids: np.ndarray  # (K, d)
    loads: np.ndarray  # (K,) exposure load per cluster
    objective: float  # mean squared residual
    n_iter: int
    violations: list = field(default_factory=list)


@dataclass
class RQResult:
    sids: list  # of SemanticId, in item_id order
    codebook: Codebook
    layer_results: list

    @property
    def violations(self):
        return [v for lr in self.layer_results for v in lr.violations]

    def codes_matrix(self) -> np.ndarray:
        return np.array([s.codes for s in self.sids], dtype=np.int64)


def kmeanspp_init(points: np.ndarray, k: int, seed) -> np.ndarray:
    """Standard D^2-sampling initialization over unweighted points."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if k > n:
        raise ValueError(f"need at least {k} points for {k} centroids, got {n}")
    rng = np.random.default_rng(seed)
    centroids = np.empty((k, pts.shape[1]))
    idx = int(rng.integers(n))
    centroids[0] = pts[idx]
    d2 = ((pts - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            # every point coincides with a chosen centroid
            idx = int(rng.integers(n))
        centroids[j] = pts[idx]
        d2 = np.minimum(d2, ((pts - centroids[j]) ** 2).sum(axis=1))
    return centroids


def cluster_load(assignments, weights, n_clusters: int | None = None) -> np.ndarray:
    """Exposure load per cluster: V_k = sum of weights of members of k."""
    z = np.asarray(assignments, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64)
    if z.shape != w.shape:
        raise ValueError("assignments and weights must be aligned")
    k = n_clusters if n_clusters is not None else (int(z.max()) + 1 if z.size else 0)
    return np.bincount(z, weights=w, minlength=k)


def _squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """(N, K) squared Euclidean distances; clipped at 0 for fp safety."""
    p2 = (points * points).sum(axis=1)[:, None]
    c2 = (centroids * centroids).sum(axis=1)[None, :]
    d2 = p2 - 2.0 * points @ centroids.T + c2
    return np.maximum(d2, 0.0)


def _repair_pass(d2, weights, z, loads, cap, pinned, strict, layer, violations):
    """Evict members of overloaded clusters into the nearest feasible cluster.

    Clusters are repaired in descending overload, members evicted in
    descending distance to their own centroid.  Targets must stay within
    cap after accepting the item, so a repaired cluster never re-overloads.
    A member with no feasible target is skipped while lighter members can
    still fix the cluster; only when the cluster stays overloaded do such
    members get force-placed (lenient) or raise (strict).
    """
    overloaded = np.flatnonzero(loads > cap)
    order = overloaded[np.argsort(-(loads[overloaded] - cap), kind="stable")]
    for k in order:
        k = int(k)
        if loads[k] <= cap:
            continue
        members = np.flatnonzero(z == k)
        movable = members[~pinned[members]]
        # farthest from the centroid first
        movable = movable[np.argsort(-d2[movable, k], kind="stable")]
        deferred = []
        for i in movable:
            if loads[k] <= cap:
                break
            i = int(i)
            wi = weights[i]
            feasible = loads + wi <= cap
            if feasible.any():
                dist_row = np.where(feasible, d2[i], np.inf)
                k2 = int(np.argmin(dist_row))
                z[i] = k2
                loads[k] -= wi
                loads[k2] += wi
            else:
                deferred.append(i)
        if loads[k] <= cap:
            continue
        if strict:
            raise CapacityError(
                f"layer {layer}: cluster {k} still overloaded after repair "
                f"(load {loads[k]:.1f} > cap {cap:.1f}, "
                f"{len(deferred)} member(s) found no feasible target)"
            )
        for i in deferred:
            if loads[k] <= cap:
                break
            wi = weights[i]
            k2 = int(np.argmin(loads))
            z[i] = k2
            loads[k] -= wi
            loads[k2] += wi
            violations.append(
                CapacityViolation(
                    layer=layer,
                    cluster=k2,
                    reason="no_feasible_target",
                    item_index=i,
                    excess=float(loads[k2] - cap),
                )
            )
        if loads[k] > cap:
            violations.append(
                CapacityViolation(
                    layer=layer, cluster=k, reason="residual_overload",
                    excess=float(loads[k] - cap),
                )
            )


def _reseed_empty(d2, weights, z, loads, pinned):
    """Re-seed empty clusters from the farthest member of the heaviest cluster."""
    k_total = loads.shape[0]
    counts = np.bincount(z, minlength=k_total)
    for k in np.flatnonzero(counts == 0):
        donors = np.flatnonzero(counts >= 2)
        if donors.size == 0:
            break
        donor = int(donors[np.argmax(loads[donors])])
        members = np.flatnonzero(z == donor)
        members = members[~pinned[members]]
        if members.size == 0:
            continue
        i = int(members[np.argmax(d2[members, donor])])
        z[i] = k
        loads[donor] -= weights[i]
        loads[k] += weights[i]
        counts[donor] -= 1
        counts[k] += 1


def capacity_kmeans_layer(
    residuals,
    weights,
    k: int,
    tau: float | None,
    seed,
    max_iter: int = 50,
    eps_conv: float = 1e-6,
    strict: bool = False,
    layer: int = 0,
) -> LayerResult:
    """One capacity-repaired Lloyd run over residual vectors.

    ``tau=None`` (or inf) disables the repair pass entirely.  Convergence:
    relative change of the mean squared residual below ``eps_conv``.
    """
    pts = np.asarray(residuals, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    n = pts.shape[0]
    if np.any(w <= 0):
        raise ValueError("all weights must be positive")

    unbounded = tau is None or math.isinf(tau)
    c_cap = w.sum() / k
    cap = math.inf if unbounded else float(tau) * c_cap

    violations = []
    pinned = np.zeros(n, dtype=bool)
    if not unbounded:
        heavy = np.flatnonzero(w > cap)
        if heavy.size:
            if strict:
                raise CapacityError(
                    f"layer {layer}: item index {int(heavy[0])} has weight "
                    f"{w[heavy[0]]:.1f} > cap {cap:.1f}; infeasible in strict mode"
                )
            pinned[heavy] = True
            for i in heavy:
                violations.append(
                    CapacityViolation(
                        layer=layer, cluster=-1, reason="overweight_item",
                        item_index=int(i), excess=float(w[i] - cap),
                    )
                )

    centroids = kmeanspp_init(pts, k, seed)
    prev_obj = math.inf
    z = np.zeros(n, dtype=np.int64)
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        d2 = _squared_distances(pts, centroids)
        z = np.argmin(d2, axis=1)  # ties -> lowest index
        loads = np.bincount(z, weights=w, minlength=k)
        if not unbounded:
            _repair_pass(d2, w, z, loads, cap, pinned, strict, layer, violations)
        _reseed_empty(d2, w, z, loads, pinned)
        for kk in range(k):
            members = np.flatnonzero(z == kk)
            if members.size:
                centroids[kk] = pts[members].mean(axis=0)
        obj = float(((pts - centroids[z]) ** 2).sum(axis=1).mean())
        if math.isfinite(prev_obj) and abs(prev_obj - obj) <= eps_conv * max(obj, 1e-30):
            prev_obj = obj
            break
        prev_obj = obj
    loads = np.bincount(z, weights=w, minlength=k)
    return LayerResult(
        assignments=z,
        centroids=centroids,
        loads=loads,
        objective=prev_obj,
        n_iter=n_iter,
        violations=violations,
    )


def capacity_constrained_rq(
    corpus,
    n_layers: int,
    k: int,
    tau: float | None,
    seed,
    max_iter: int = 50,
    eps_conv: float = 1e-6,
    strict: bool = False,
) -> RQResult:
    """Layered residual quantization with per-layer capacity repair.

    Layer l clusters the residual left by layers < l; per-layer RNG seeds
    are derived as seed + layer so deeper runs share shallow layers.
    Items are canonicalized to item_id order before clustering.
    """
    if len(corpus) == 0:
        raise ValueError("corpus must be non-empty")
    items = sorted(corpus.items, key=lambda it: it.item_id)
    emb = np.array([it.embedding for it in items])
    w = np.array([it.exposure_weight for it in items], dtype=np.float64)

    residual = emb.copy()
    codes = np.empty((len(items), n_layers), dtype=np.int64)
    layers, caps, results = [], [], []
    for l in range(n_layers):
        res = capacity_kmeans_layer(
            residual, w, k, tau, seed + l,
            max_iter=max_iter, eps_conv=eps_conv, strict=strict, layer=l,
        )
        codes[:, l] = res.assignments
        residual = residual - res.centroids[res.assignments]
        layers.append(res.centroids)
        caps.append(float(w.sum() / k))
        results.append(res)

    tau_stored = None if (tau is None or math.isinf(tau)) else float(tau)
    codebook = Codebook(layers=layers, K=k, L=n_layers, tau=tau_stored, c_cap_per_layer=caps)
    sids = [SemanticId(it.item_id, tuple(int(c) for c in codes[i])) for i, it in enumerate(items)]
    return RQResult(sids=sids, codebook=codebook, layer_results=results)


def rq_kmeans_baseline(corpus, n_layers, k, seed, max_iter=50, eps_conv=1e-6) -> RQResult:
    """Residual K-means without the repair pass (unbounded capacity)."""
    return capacity_constrained_rq(
        corpus, n_layers, k, tau=None, seed=seed, max_iter=max_iter, eps_conv=eps_conv
    )


def reconstruction_error(corpus, sids, codebook) -> float:
    """Total squared error between embeddings and their code reconstructions."""
    by_id = {it.item_id: it for it in corpus.items}
    total = 0.0
    for s in sids:
        recon = sum(codebook.layers[l][c] for l, c in enumerate(s.codes))
        total += float(((by_id[s.item_id].embedding - recon) ** 2).sum())
    return total


# ----------------------------------------------------------------------
# persistence: single JSON document for codebooks, JSONL for codes
# ----------------------------------------------------------------------

_CODEBOOK_KEYS = {"L", "K", "tau", "c_cap_per_layer", "layers", "meta"}


def save_codebook(codebook: Codebook, path, meta: dict | None = None):
    doc = {
        "L": codebook.L,
        "K": codebook.K,
        "tau": codebook.tau,
        "c_cap_per_layer": codebook.c_cap_per_layer,
        "layers": [layer.tolist() for layer in codebook.layers],
        "meta": meta or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_codebook(path) -> Codebook:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    unknown = set(doc) - _CODEBOOK_KEYS
    if unknown:
        raise ValueError(f"unknown codebook field(s) {sorted(unknown)}")
    return Codebook(
        layers=[np.asarray(layer, dtype=np.float64) for layer in doc["layers"]],
        K=doc["K"],
        L=doc["L"],
        tau=doc["tau"],
        c_cap_per_layer=list(doc["c_cap_per_layer"]),
    )


def save_sids(sids, path):
    with open(path, "w", encoding="utf-8") as fh:
        for s in sids:
            fh.write(json.dumps({"item_id": s.item_id, "sid": list(s.codes)}) + "\n")


def load_sids(path) -> list:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
            unknown = set(obj) - {"item_id", "sid"}
            if unknown:
                raise ValueError(f"line {lineno}: unknown field(s) {sorted(unknown)}")
            out.append(SemanticId(obj["item_id"], tuple(obj["sid"])))
    return out
