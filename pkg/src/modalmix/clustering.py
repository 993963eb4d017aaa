"""K-means codebooks and frame-level pseudo-label targets.

Codebooks quantize encoder features (or raw anchor frames in the first
iteration) into the shared target vocabulary for masked prediction. Fits
are fully deterministic given (features, K, seed): k-means++ seeding,
Lloyd iterations with monotone inertia, empty clusters reseeded to the
point currently farthest from its centroid, best-of-n restarts.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import features as feat
from .seeding import rng_for

CODEBOOK_MAGIC = b"UMKM"


class ClusteringError(ValueError):
    """Invalid clustering request."""


@dataclass
class Codebook:
    centroids: np.ndarray  # (K, D)
    source: str            # training-data tag, e.g. "raw-anchor", "C_ab", "C_a", "C_b", "C_union"
    inertia: float = 0.0
    iterations: int = 0

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 2:
            raise ClusteringError(f"need >= 2 centroids, got shape {self.centroids.shape}")
        if not np.isfinite(self.centroids).all():
            raise ClusteringError("non-finite centroids")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    """(N, K) squared euclidean distances via the expansion identity."""
    d = (x * x).sum(axis=1)[:, None] - 2.0 * (x @ c.T) + (c * c).sum(axis=1)[None, :]
    np.maximum(d, 0.0, out=d)
    return d


def _assign_ids(x: np.ndarray, c: np.ndarray):
    d = _sq_dists(x, c)
    ids = d.argmin(axis=1)  # argmin takes the lowest index on ties
    return ids, d[np.arange(len(x)), ids]


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[int(rng.integers(0, n))]
    best = _sq_dists(x, centroids[:1])[:, 0]
    for j in range(1, k):
        total = best.sum()
        if total <= 0.0:
            centroids[j] = x[int(rng.integers(0, n))]
        else:
            centroids[j] = x[int(rng.choice(n, p=best / total))]
        best = np.minimum(best, _sq_dists(x, centroids[j:j + 1])[:, 0])
    return centroids


def _lloyd(x: np.ndarray, init: np.ndarray, max_iters: int):
    n, d = x.shape
    k = init.shape[0]
    col = np.arange(d)
    centroids = init.copy()
    ids, dists = _assign_ids(x, centroids)
    iterations = 0
    for _ in range(max_iters):
        new_centroids = centroids.copy()
        counts = np.bincount(ids, minlength=k)
        sums = np.bincount((ids[:, None] * d + col).ravel(), weights=x.ravel(),
                           minlength=k * d).reshape(k, d)
        nonempty = counts > 0
        new_centroids[nonempty] = sums[nonempty] / counts[nonempty][:, None]
        empties = np.flatnonzero(~nonempty)
        if empties.size:
            order = np.argsort(-dists, kind="stable")
            for j, pick in zip(empties, order):
                new_centroids[j] = x[int(pick)]
        new_ids, new_dists = _assign_ids(x, new_centroids)
        iterations += 1
        converged = np.array_equal(new_ids, ids)
        centroids, ids, dists = new_centroids, new_ids, new_dists
        if converged:
            break
    return centroids, float(dists.sum()), iterations


def kmeans_fit(features: np.ndarray, k: int, max_iters: int = 100, seed: int = 0,
               n_restarts: int = 3, subsample: int = 200_000, source: str = "") -> Codebook:
    """Best-of-n-restarts Lloyd fit. N must be >= K.

    Fits on at most `subsample` rows (seeded uniform choice) for memory
    bounds; inertia/iterations describe the winning restart on the fit set.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ClusteringError(f"features must be (N, D), got {x.shape}")
    if x.shape[0] < k:
        raise ClusteringError(f"need at least K={k} points, got N={x.shape[0]}")
    if x.shape[0] > subsample:
        keep = rng_for(seed, "kmeans", "subsample").choice(x.shape[0], size=subsample, replace=False)
        x = x[np.sort(keep)]
    best = None
    for r in range(max(1, n_restarts)):
        rng = rng_for(seed, "kmeans", "restart", r)
        centroids, inertia, iters = _lloyd(x, _kmeanspp(x, k, rng), max_iters)
        if best is None or inertia < best[1]:
            best = (centroids, inertia, iters)
    centroids, inertia, iters = best
    return Codebook(centroids=centroids, source=source, inertia=inertia, iterations=iters)


def assign(codebook: Codebook, features: np.ndarray) -> np.ndarray:
    """Nearest-centroid ids (ties -> lowest id)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != codebook.centroids.shape[1]:
        raise ClusteringError(
            f"feature dim {x.shape} vs codebook dim {codebook.centroids.shape[1]}")
    ids, _ = _assign_ids(x, codebook.centroids)
    return ids.astype(np.int64)


def inertia_of(codebook: Codebook, features: np.ndarray) -> float:
    x = np.asarray(features, dtype=np.float64)
    _, dists = _assign_ids(x, codebook.centroids)
    return float(dists.sum())


@dataclass
class TargetSet:
    """Per-utterance pseudo-label assignments plus provenance."""

    assignments: dict            # utterance id -> (T,) int64 cluster ids
    codebook: Codebook
    iteration: int
    skipped: list = field(default_factory=list)  # ids excluded (anchor rule)

    @property
    def k(self) -> int:
        return self.codebook.k


def build_targets(params, corpus, iteration: int, k: int, seed: int = 0,
                  n_restarts: int = 3) -> TargetSet:
    """Pseudo-label targets for one pre-training iteration.

    Iteration 1 clusters raw anchor-modality (A) frames; utterances without
    the anchor are skipped and reported. Iterations >= 2 cluster final-layer
    encoder features extracted from each utterance's complete available
    input (no dropout), so every utterance receives targets from the one
    shared codebook.
    """
    if iteration < 1:
        raise ClusteringError(f"iteration must be >= 1, got {iteration}")
    if iteration == 1:
        anchored = [u for u in corpus.utterances if u.features_a is not None]
        if not anchored:
            raise ClusteringError("iteration 1 needs at least one anchor-bearing (A) utterance")
        pooled = np.concatenate([u.features_a for u in anchored], axis=0)
        codebook = kmeans_fit(pooled, k, seed=seed, n_restarts=n_restarts, source="raw-anchor")
        assignments = {u.id: assign(codebook, u.features_a) for u in anchored}
        skipped = [u.id for u in corpus.utterances if u.features_a is None]
        return TargetSet(assignments, codebook, iteration, skipped)
    if params is None:
        raise ClusteringError("iterations >= 2 need a model to extract features from")
    pooled = feat.pooled_features(params, corpus.utterances, subset="full")
    codebook = kmeans_fit(pooled, k, seed=seed, n_restarts=n_restarts, source="model-final")
    assignments = {
        u.id: assign(codebook, feat.final_features(params, u, subset="full"))
        for u in corpus.utterances
    }
    return TargetSet(assignments, codebook, iteration, skipped=[])


def write_codebook(path, codebook: Codebook):
    """Binary codebook: magic, K, D (u32), centroids f32 LE, source tag."""
    tag = codebook.source.encode("utf-8")
    with open(path, "wb") as f:
        f.write(CODEBOOK_MAGIC)
        f.write(struct.pack("<II", codebook.k, codebook.centroids.shape[1]))
        f.write(np.ascontiguousarray(codebook.centroids, dtype="<f4").tobytes())
        f.write(struct.pack("<H", len(tag)))
        f.write(tag)


def read_codebook(path) -> Codebook:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CODEBOOK_MAGIC:
            raise ClusteringError(f"{path}: bad codebook magic {magic!r}")
        k, d = struct.unpack("<II", f.read(8))
        centroids = np.frombuffer(f.read(4 * k * d), dtype="<f4").reshape(k, d).astype(np.float64)
        (tag_len,) = struct.unpack("<H", f.read(2))
        source = f.read(tag_len).decode("utf-8")
    return Codebook(centroids=centroids, source=source)
