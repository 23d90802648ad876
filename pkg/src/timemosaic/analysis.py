"""Temporal-structure analysis of raw series via patch clustering.

Pipeline: cut each channel into non-overlapping patches, min-max scale
each patch to remove level/amplitude, cluster the patch shapes with
k-means, then score the vocabulary with silhouette (how separated the
shapes are) and a Zipf-law deviation (how skewed the usage frequencies
are), plus a cluster-transition matrix over consecutive patches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class AnalysisError(ValueError):
    pass


def extract_patches(series: np.ndarray, patch_len: int) -> np.ndarray:
    """Non-overlapping patches from every channel, each min-max scaled to [0, 1].

    series: (T,) or (T, C). The trailing T % patch_len points are dropped.
    Constant patches map to all-0.5. Returns (n_patches_total, patch_len);
    channel patches are stacked channel-by-channel, each channel keeping
    its temporal order.
    """
    arr = np.asarray(series, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise AnalysisError(f"expected (T,) or (T, C) series, got shape {arr.shape}")
    t, c = arr.shape
    if patch_len < 1 or patch_len > t:
        raise AnalysisError(f"patch_len={patch_len} invalid for series of length {t}")
    n = t // patch_len
    patches = arr[: n * patch_len].T.reshape(c * n, patch_len)
    lo = patches.min(axis=1, keepdims=True)
    hi = patches.max(axis=1, keepdims=True)
    span = hi - lo
    flat = span[:, 0] == 0
    span[flat] = 1.0
    out = (patches - lo) / span
    out[flat] = 0.5
    return out


def pool_to_length(patches: np.ndarray, target_len: int) -> np.ndarray:
    """Mean-pool fixed-length patches down to a shorter common length.

    Requires patch length to be a multiple of target_len; used to compare
    vocabularies built at different patch sizes in one feature space.
    """
    n, p = patches.shape
    if p % target_len != 0:
        raise AnalysisError(f"cannot pool length {p} to {target_len}")
    return patches.reshape(n, target_len, p // target_len).mean(axis=2)


def kmeans(
    points: np.ndarray,
    k: int,
    seed: int = 0,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding.

    Returns (labels (n,), centers (k, d)). Empty clusters are reseeded to
    the point currently farthest from its assigned center.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if k < 1 or k > n:
        raise AnalysisError(f"k={k} invalid for {n} points")
    rng = np.random.default_rng(seed)

    # k-means++ seeding
    centers = np.empty((k, pts.shape[1]))
    centers[0] = pts[rng.integers(n)]
    d2 = np.sum((pts - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total == 0:
            centers[j:] = pts[rng.integers(n, size=k - j)]
            break
        centers[j] = pts[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((pts - centers[j]) ** 2, axis=1))

    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        dist = np.sum((pts[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        labels = dist.argmin(axis=1)
        new_centers = centers.copy()
        for j in range(k):
            mask = labels == j
            if mask.any():
                new_centers[j] = pts[mask].mean(axis=0)
            else:
                worst = dist[np.arange(n), labels].argmax()
                new_centers[j] = pts[worst]
                labels[worst] = j
        shift = np.sqrt(np.sum((new_centers - centers) ** 2, axis=1)).max()
        centers = new_centers
        if shift <= tol:
            break
    dist = np.sum((pts[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    labels = dist.argmin(axis=1)
    return labels, centers


def silhouette_score(points: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette over all points (euclidean distance).

    Singleton clusters score 0 for their point; a point with a == b == 0
    also scores 0. Requires at least 2 distinct clusters.
    """
    pts = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    uniq = np.unique(labels)
    if len(uniq) < 2:
        raise AnalysisError("silhouette needs at least 2 clusters")
    n = len(pts)
    dist = np.sqrt(np.maximum(
        np.sum(pts ** 2, axis=1)[:, None]
        + np.sum(pts ** 2, axis=1)[None, :]
        - 2 * pts @ pts.T, 0.0))
    sizes = {c: int(np.sum(labels == c)) for c in uniq}
    s = np.zeros(n)
    for i in range(n):
        c = labels[i]
        if sizes[c] == 1:
            continue
        a = dist[i, labels == c].sum() / (sizes[c] - 1)
        b = min(dist[i, labels == o].mean() for o in uniq if o != c)
        m = max(a, b)
        s[i] = 0.0 if m == 0 else (b - a) / m
    return float(s.mean())


def cluster_frequencies(labels: np.ndarray, k: int) -> np.ndarray:
    """Occurrence counts per cluster, sorted descending (rank order)."""
    counts = np.bincount(np.asarray(labels), minlength=k)
    return np.sort(counts)[::-1]


def zipf_deviation(frequencies: np.ndarray) -> float:
    """Departure of the rank-frequency curve from an ideal Zipf law f_r = C/r.

    Fits only the constant C by least squares in log-log space (exponent
    fixed at -1) and returns the RMS residual of log(freq) against the fit,
    normalised by the RMS of log(freq). 0 means usage is exactly Zipfian;
    flat (uniform) usage scores > 0. Zero-count clusters are excluded;
    needs >= 3 nonzero frequencies.
    """
    freq = np.sort(np.asarray(frequencies, dtype=np.float64))[::-1]
    freq = freq[freq > 0]
    if len(freq) < 3:
        raise AnalysisError(f"need >= 3 nonzero frequencies, got {len(freq)}")
    x = np.log(np.arange(1, len(freq) + 1))
    y = np.log(freq)
    log_c = np.mean(y + x)  # least-squares intercept for fixed slope -1
    resid = y - (log_c - x)
    denom = np.sqrt(np.mean(y ** 2))
    if denom == 0:
        return 0.0
    return float(np.sqrt(np.mean(resid ** 2)) / denom)


def transition_matrix(labels_per_sequence, k: int, eps: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalised counts of consecutive cluster transitions.

    labels_per_sequence: iterable of 1-D label arrays; transitions are
    counted inside each sequence only (no wraparound between sequences).
    Returns (P, C) with P[i, j] = C[i, j] / (sum_j' C[i, j'] + eps).
    """
    counts = np.zeros((k, k), dtype=np.float64)
    for labels in labels_per_sequence:
        labels = np.asarray(labels)
        if labels.ndim != 1:
            raise AnalysisError("each label sequence must be 1-D")
        if len(labels) and (labels.min() < 0 or labels.max() >= k):
            raise AnalysisError(f"labels must lie in [0, {k})")
        np.add.at(counts, (labels[:-1], labels[1:]), 1.0)
    return counts / (counts.sum(axis=1, keepdims=True) + eps), counts


def top_k_submatrix(p: np.ndarray, row_counts: np.ndarray, top_k: int) -> tuple[np.ndarray, np.ndarray]:
    """Rows/columns of the top_k clusters with the most outgoing transitions.

    row_counts: per-cluster outgoing-transition totals (row sums of the raw
    count matrix). Returns (kept indices in frequency order, submatrix).
    """
    k = p.shape[0]
    if top_k > k:
        raise AnalysisError(f"top_k={top_k} exceeds number of clusters {k}")
    order = np.argsort(row_counts)[::-1][:top_k]
    return order, p[np.ix_(order, order)]


@dataclass
class StructureReport:
    patch_len: int
    n_clusters: int
    silhouette: float
    zipf: float
    frequencies: np.ndarray
    labels: np.ndarray
    centers: np.ndarray

    def summary(self) -> dict:
        return {
            "patch_len": self.patch_len,
            "n_clusters": self.n_clusters,
            "silhouette": self.silhouette,
            "zipf_deviation": self.zipf,
            "n_patches": int(len(self.labels)),
        }


def analyze_structure(series: np.ndarray, patch_len: int, k: int, seed: int = 0) -> StructureReport:
    """End-to-end: patches -> k-means -> silhouette + Zipf deviation."""
    patches = extract_patches(series, patch_len)
    labels, centers = kmeans(patches, k, seed=seed)
    freq = cluster_frequencies(labels, k)
    return StructureReport(
        patch_len=patch_len,
        n_clusters=k,
        silhouette=silhouette_score(patches, labels),
        zipf=zipf_deviation(freq),
        frequencies=freq,
        labels=labels,
        centers=centers,
    )
