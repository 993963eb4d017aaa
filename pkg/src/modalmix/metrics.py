"""Cluster-quality and representation analysis.

PNMI scores cluster assignments against ground-truth units (mutual
information normalized by label entropy, in [0,1]). The cross-quantization
grid fits one codebook per feature condition (AB / A-only / B-only plus
their union) and quantizes every condition with every codebook; a model
whose representations are modality-agnostic shows near-uniform columns,
while modality-specific representations collapse off-diagonal. The same
grid per encoder depth tracks where alignment emerges, and a deterministic
2-component PCA stands in for stochastic embedding plots.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import clustering, features as feat
from .seeding import rng_for, subseed

SOURCES = ("union", "ab", "a", "b")   # codebook training conditions (rows)
CONDITIONS = ("ab", "a", "b")          # feature conditions (columns)


class MetricsError(ValueError):
    """Invalid metric request."""


def pnmi(labels, assignment) -> float:
    """I(labels; clusters) / H(labels) from empirical joint counts.

    Natural log (the normalization cancels the base). Plug-in estimates,
    no bias correction. Zero label entropy is undefined and raises.
    """
    y = np.asarray(labels, dtype=np.int64)
    c = np.asarray(assignment, dtype=np.int64)
    if y.shape != c.shape or y.ndim != 1 or y.size == 0:
        raise MetricsError(f"need equal-length 1-D label/cluster arrays, got {y.shape} vs {c.shape}")
    _, y_ids = np.unique(y, return_inverse=True)
    _, c_ids = np.unique(c, return_inverse=True)
    ny, ncl = y_ids.max() + 1, c_ids.max() + 1
    joint = np.bincount(y_ids * ncl + c_ids, minlength=ny * ncl).reshape(ny, ncl) / y.size
    py = joint.sum(axis=1)
    pc = joint.sum(axis=0)
    nz = py > 0
    h_y = -float((py[nz] * np.log(py[nz])).sum())
    if h_y <= 0.0:
        raise MetricsError("label entropy is zero; PNMI undefined")
    mask = joint > 0
    mi = float((joint[mask] * (np.log(joint[mask])
                               - np.log(py[:, None] * pc[None, :])[mask])).sum())
    return float(np.clip(mi / h_y, 0.0, 1.0))


@dataclass
class PnmiMatrix:
    """Codebook-source rows x feature-condition columns of PNMI values."""

    values: np.ndarray            # (4, 3)
    rows: tuple = SOURCES
    cols: tuple = CONDITIONS
    k: int = 0
    layer: int = -1               # -1 = final output

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.rows), len(self.cols)):
            raise MetricsError(f"matrix shape {self.values.shape} vs labels")
        if not np.isfinite(self.values).all() or (self.values < 0).any() or (self.values > 1).any():
            raise MetricsError("PNMI values must be finite in [0,1]")

    def value(self, source: str, condition: str) -> float:
        return float(self.values[self.rows.index(source), self.cols.index(condition)])

    def column_min_max_ratio(self) -> dict:
        """Per feature condition: min over codebooks / max over codebooks."""
        out = {}
        for j, cond in enumerate(self.cols):
            col = self.values[:, j]
            out[cond] = float(col.min() / col.max()) if col.max() > 0 else 1.0
        return out


def modality_gap(matrix: PnmiMatrix) -> float:
    """Mean over feature conditions of (matched PNMI - worst single-source PNMI).

    Uses only the single-condition codebooks (ab/a/b); near zero when every
    codebook quantizes every condition equally well.
    """
    gaps = []
    for cond in CONDITIONS:
        matched = matrix.value(cond, cond)
        worst = min(matrix.value(src, cond) for src in CONDITIONS)
        gaps.append(matched - worst)
    return float(np.mean(gaps))


def _pooled_by_condition(params, utts, extract):
    """{condition: (features (N,D), labels (N,), per-utt list)} for AB utterances."""
    out = {}
    labels = np.concatenate([u.unit_labels for u in utts])
    for cond in CONDITIONS:
        per_utt = [extract(u, cond) for u in utts]
        out[cond] = (np.concatenate(per_utt, axis=0), labels, per_utt)
    return out


def _grid_from_features(by_cond, k: int, seed: int, layer: int = -1) -> PnmiMatrix:
    feats = {cond: by_cond[cond][0] for cond in CONDITIONS}
    labels = by_cond["ab"][1]
    books = {}
    for cond in CONDITIONS:
        books[cond] = clustering.kmeans_fit(feats[cond], k, source=f"C_{cond}",
                                            seed=subseed(seed, "metrics", "cb", layer, cond))
    union = np.concatenate([feats[c] for c in CONDITIONS], axis=0)
    books["union"] = clustering.kmeans_fit(union, k, source="C_union",
                                           seed=subseed(seed, "metrics", "cb", layer, "union"))
    values = np.zeros((len(SOURCES), len(CONDITIONS)))
    for i, src in enumerate(SOURCES):
        for j, cond in enumerate(CONDITIONS):
            values[i, j] = pnmi(labels, clustering.assign(books[src], feats[cond]))
    return PnmiMatrix(values=values, k=k, layer=layer)


def cross_quantization(params, corpus, k: int, seed: int = 0) -> PnmiMatrix:
    """Table-style codebook/feature PNMI grid on final-layer features.

    Uses every AB utterance of the corpus; features are extracted with the
    full input, A-only input and B-only input, four codebooks are fit
    (per-condition plus pooled union), and each condition is quantized with
    each codebook.
    """
    utts = corpus.by_profile("ab")
    if not utts:
        raise MetricsError("cross-quantization needs AB utterances")
    by_cond = _pooled_by_condition(params, utts,
                                   lambda u, c: feat.final_features(params, u, subset=c))
    return _grid_from_features(by_cond, k, seed)


def layerwise_pnmi(params, corpus, k: int, seed: int = 0) -> list:
    """One PnmiMatrix per encoder depth (embedding through final output).

    Index 0 is the fused input embedding; the last entry uses the
    layer-normed final output, matching what downstream consumers see.
    """
    utts = corpus.by_profile("ab")
    if not utts:
        raise MetricsError("layerwise PNMI needs AB utterances")
    n_layers = params.config.layers + 1
    per_cond_layers = {
        cond: [feat.layer_features(params, u, subset=cond) for u in utts]
        for cond in CONDITIONS
    }
    labels = np.concatenate([u.unit_labels for u in utts])
    grids = []
    for layer in range(n_layers):
        by_cond = {
            cond: (np.concatenate([ls[layer] for ls in per_cond_layers[cond]], axis=0),
                   labels, None)
            for cond in CONDITIONS
        }
        grids.append(_grid_from_features(by_cond, k, seed, layer=layer))
    return grids


# ---------------------------------------------------------------------------
# Deterministic 2-D projection
# ---------------------------------------------------------------------------


@dataclass
class ProjectionExport:
    coords: np.ndarray       # (N, <=2)
    tags: list               # condition per row
    utt_ids: list
    frame_idx: np.ndarray
    basis: np.ndarray        # (<=2, D) principal directions
    mean: np.ndarray         # (D,) centering offset
    eigenvalues: np.ndarray
    rank_deficient: bool = False

    def separation_ratio(self) -> float:
        """Mean inter-condition centroid distance / mean intra-condition spread."""
        tags = np.asarray(self.tags)
        cents = {c: self.coords[tags == c].mean(axis=0) for c in CONDITIONS}
        inter = np.mean([np.linalg.norm(cents[a] - cents[b])
                         for i, a in enumerate(CONDITIONS) for b in CONDITIONS[i + 1:]])
        intra = np.mean([np.linalg.norm(self.coords[tags == c] - cents[c], axis=1).mean()
                         for c in CONDITIONS])
        return float(inter / intra)


def top2_pca(x: np.ndarray, tol: float = 1e-9, max_iters: int = 10_000):
    """Top-2 principal directions by power iteration with deflation.

    Returns (components (r, D), eigenvalues (r,), rank_deficient) with
    r <= 2; components have a deterministic sign (largest-magnitude entry
    positive). Rank deficiency truncates to the available components.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    mean = x.mean(axis=0)
    xc = x - mean
    cov = (xc.T @ xc) / n
    comps, eigs = [], []
    work = cov.copy()
    for idx in range(min(2, d)):
        v = rng_for(0, "pca", idx).normal(size=d)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iters):
            w = work @ v
            norm = np.linalg.norm(w)
            if norm <= 1e-300:
                lam = 0.0
                break
            v_new = w / norm
            lam_new = float(v_new @ work @ v_new)
            if abs(lam_new - lam) <= tol * max(abs(lam_new), 1.0):
                v, lam = v_new, lam_new
                break
            v, lam = v_new, lam_new
        if lam <= 1e-12 * max(eigs[0] if eigs else 1.0, 1e-12):
            break
        pivot = int(np.argmax(np.abs(v)))
        if v[pivot] < 0:
            v = -v
        comps.append(v)
        eigs.append(lam)
        work = work - lam * np.outer(v, v)
    rank_deficient = len(comps) < min(2, d)
    if not comps:
        return np.zeros((0, d)), np.zeros(0), True
    return np.stack(comps), np.asarray(eigs), rank_deficient


def project_features(params, corpus, n_frames: int = 500, seed: int = 0) -> ProjectionExport:
    """Sample frames per input condition, pool, and project to 2-D.

    n_frames are drawn per condition (ab / a-only / b-only) from the AB
    utterances, pooled, centered, and projected onto the top-2 principal
    directions. Raises if the corpus has fewer frames than requested.
    """
    utts = corpus.by_profile("ab")
    if not utts:
        raise MetricsError("projection needs AB utterances")
    total = sum(u.frames for u in utts)
    if total < n_frames:
        raise MetricsError(f"corpus has {total} frames, need at least {n_frames}")
    rng = rng_for(seed, "projection")
    frame_index = np.concatenate([np.stack([np.full(u.frames, i), np.arange(u.frames)], axis=1)
                                  for i, u in enumerate(utts)])
    rows, tags, utt_ids, fidx = [], [], [], []
    for cond in CONDITIONS:
        pick = np.sort(rng.choice(total, size=n_frames, replace=False))
        feats = {i: feat.final_features(params, utts[i], subset=cond)
                 for i in np.unique(frame_index[pick, 0])}
        for ui, fi in frame_index[pick]:
            rows.append(feats[ui][fi])
            tags.append(cond)
            utt_ids.append(utts[ui].id)
            fidx.append(fi)
    pooled = np.stack(rows)
    basis, eigs, deficient = top2_pca(pooled)
    mean = pooled.mean(axis=0)
    coords = (pooled - mean) @ basis.T
    return ProjectionExport(coords=coords, tags=tags, utt_ids=utt_ids,
                            frame_idx=np.asarray(fidx), basis=basis, mean=mean,
                            eigenvalues=eigs, rank_deficient=deficient)


# ---------------------------------------------------------------------------
# Table export
# ---------------------------------------------------------------------------


def write_pnmi_csv(path, matrices):
    """Comma-separated grid(s): one row per (layer, codebook source)."""
    if isinstance(matrices, PnmiMatrix):
        matrices = [matrices]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "codebook"] + [f"Y_{c}" for c in CONDITIONS])
        for m in matrices:
            for i, src in enumerate(m.rows):
                w.writerow([m.layer, f"C_{src}"] + [f"{v:.6f}" for v in m.values[i]])


def write_projection_csv(path, export: ProjectionExport):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["x", "y", "modality", "utterance", "frame"])
        for i in range(len(export.tags)):
            xy = export.coords[i]
            y = xy[1] if xy.shape[0] > 1 else 0.0
            w.writerow([f"{xy[0]:.8f}", f"{y:.8f}", export.tags[i],
                        export.utt_ids[i], int(export.frame_idx[i])])
