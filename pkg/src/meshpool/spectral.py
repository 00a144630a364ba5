"""Spectral vertex features and the multi-level clustering hierarchy.

Solves the generalized symmetric eigenproblem ``(D - W) x = lam * A x`` for
the smallest eigenpairs, assembles the per-vertex network input (normalized
positions, normals, absolute low-frequency eigenvector values) and builds
the pooling hierarchy by clustering vertices at a decreasing sequence of
cluster counts. Hierarchy clustering defaults to deterministic divisive
splits on normalized positions: eigenvector embeddings are unstable across
retriangulations of the same surface (near-degenerate pairs rotate within
their eigenspace), while median splits of the geometry depend only on
integral quantities and survive a remesh nearly unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.linalg import eigh
from scipy.optimize import linear_sum_assignment
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from .mesh import Mesh, LaplacianOperator

# Shift for the shift-invert iterative solver; strictly below the spectrum so
# the factored matrix (D - W) - shift * A is positive definite.
SIGMA_SHIFT = -0.01

# Relative eigenpair residual accepted from either solver path.
RESIDUAL_TOL = 1e-6

# Problems smaller than this go straight to the dense solver in "auto" mode;
# ARPACK subspaces degenerate when k+1 approaches N.
DENSE_CUTOFF = 50

# Largest problem the dense path accepts.
DENSE_LIMIT = 3000

_V0_SEED = 8191  # fixed ARPACK start vector => reproducible solves

KMEANS_MAX_ITER = 300


class EigensolverError(RuntimeError):
    """Eigensolver failure; carries the achieved residual when known."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


@dataclass
class SpectralBasis:
    """The k+1 smallest generalized eigenpairs of the mesh Laplacian.

    ``eigenvectors`` columns are area-orthonormal (``x_i^T A x_j = delta_ij``)
    and sorted by ascending eigenvalue; column 0 is the constant mode on
    closed meshes.
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray

    @property
    def n_modes(self) -> int:
        return len(self.eigenvalues)


def eig_residuals(op: LaplacianOperator, basis: SpectralBasis) -> np.ndarray:
    """Relative residual ||K x - lam A x|| / ||A x|| per eigenpair."""
    K = op.stiffness()
    ax = basis.eigenvectors * op.areas[:, None]
    num = np.linalg.norm(K @ basis.eigenvectors - basis.eigenvalues[None, :] * ax, axis=0)
    return num / np.linalg.norm(ax, axis=0)


def solve_eigs(op: LaplacianOperator, k: int, method: str = "auto") -> SpectralBasis:
    """Smallest k+1 eigenpairs of ``(D - W) x = lam * A x``.

    Parameters
    ----------
    op : LaplacianOperator
    k : int
        Number of nonconstant modes; k+1 pairs are returned.
    method : {"auto", "iterative", "dense"}
        "iterative" is shift-invert Lanczos (ARPACK); "dense" is a direct
        generalized eigendecomposition, accepted up to N=3000. "auto" picks
        the iterative path except for small problems.

    Raises
    ------
    ValueError
        If ``k + 1 > N``.
    EigensolverError
        On non-convergence (carries the achieved residual) or when a
        solution fails the residual tolerance.
    """
    n = op.n_vertices
    want = k + 1
    if k < 0:
        raise ValueError("k must be nonnegative")
    if want > n:
        raise ValueError(f"requested {want} modes from a mesh with {n} vertices")
    if method not in ("auto", "iterative", "dense"):
        raise ValueError(f"unknown method {method!r}")
    if method == "auto":
        method = "dense" if (n < DENSE_CUTOFF or want > n - 1) else "iterative"

    K = op.stiffness()
    if method == "dense":
        if n > DENSE_LIMIT:
            raise EigensolverError(f"dense solver refused for N={n} > {DENSE_LIMIT}")
        vals, vecs = eigh(K.toarray(), np.diag(op.areas))
        vals, vecs = vals[:want], vecs[:, :want]
    else:
        if want > n - 1:
            raise ValueError(f"iterative solver needs k + 1 <= N - 1, got {want} of N={n}")
        v0 = np.random.default_rng(_V0_SEED).standard_normal(n)
        try:
            vals, vecs = eigsh(K, k=want, M=op.mass().tocsc(), sigma=SIGMA_SHIFT, which="LM", v0=v0)
        except ArpackNoConvergence as exc:
            partial = SpectralBasis(np.asarray(exc.eigenvalues), np.asarray(exc.eigenvectors))
            res = float(eig_residuals(op, partial).max()) if partial.n_modes else None
            raise EigensolverError(
                f"iterative eigensolver did not converge ({partial.n_modes}/{want} modes)",
                residual=res,
            ) from exc
    order = np.argsort(vals)
    basis = SpectralBasis(np.ascontiguousarray(vals[order]), np.ascontiguousarray(vecs[:, order]))
    worst = float(eig_residuals(op, basis).max())
    if worst >= RESIDUAL_TOL:
        raise EigensolverError(f"eigenpair residual {worst:.3e} exceeds {RESIDUAL_TOL:.0e}", residual=worst)
    return basis


def normalize_positions(vertices: np.ndarray) -> np.ndarray:
    """Center to the vertex centroid and scale the bounding-box diagonal to 1."""
    centered = vertices - vertices.mean(axis=0)
    extent = centered.max(axis=0) - centered.min(axis=0)
    return centered / np.linalg.norm(extent)


def eigenvector_features(
    basis: SpectralBasis, n_eigenvectors: int = 16, include_constant: bool = False
) -> np.ndarray:
    """Absolute values of the lowest-frequency eigenvector columns.

    The constant mode is skipped by default; ``include_constant`` keeps it as
    the first column instead.
    """
    first = 0 if include_constant else 1
    needed = first + n_eigenvectors
    if basis.n_modes < needed:
        raise ValueError(f"basis has {basis.n_modes} modes, need {needed}")
    return np.abs(basis.eigenvectors[:, first:needed])


def build_input_features(
    mesh: Mesh,
    normals: np.ndarray,
    basis: SpectralBasis,
    n_eigenvectors: int = 16,
    include_constant: bool = False,
) -> np.ndarray:
    """Per-vertex input matrix: [xyz(3), normal(3), |eigenvector|(n_eig)].

    Positions are centered and scaled to unit bounding-box diagonal. Taking
    absolute eigenvector values makes the columns independent of the solver's
    arbitrary sign choices.
    """
    cols = [
        normalize_positions(mesh.vertices),
        np.asarray(normals, dtype=np.float64),
        eigenvector_features(basis, n_eigenvectors, include_constant),
    ]
    return np.ascontiguousarray(np.hstack(cols))


def _squared_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = points[:, None, :] - centers[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = _squared_distances(points, centers[:1])[:, 0]
    for t in range(1, k):
        total = d2.sum()
        if total > 0.0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = int(rng.integers(n))
        centers[t] = points[idx]
        d2 = np.minimum(d2, _squared_distances(points, centers[t : t + 1])[:, 0])
    return centers


def _repair_empty(labels: np.ndarray, own_d2: np.ndarray, k: int) -> np.ndarray:
    """Give every empty cluster the point farthest from its own centroid.

    Ties break to the lowest point index; a cluster is never emptied by the
    repair itself.
    """
    counts = np.bincount(labels, minlength=k)
    empties = np.flatnonzero(counts == 0)
    if not len(empties):
        return labels
    labels = labels.copy()
    d2 = own_d2.astype(np.float64, copy=True)
    for j in empties:
        cand = int(np.argmax(d2))
        while counts[labels[cand]] <= 1:
            d2[cand] = -np.inf
            cand = int(np.argmax(d2))
        counts[labels[cand]] -= 1
        labels[cand] = j
        counts[j] = 1
        d2[cand] = -np.inf
    return labels


def kmeans(points: np.ndarray, k: int, seed) -> np.ndarray:
    """Seeded k-means returning a length-N cluster id vector.

    Lloyd iterations with k-means++ initialization. The rows are
    canonicalized by lexicographic sort before any seeded sampling, so any
    permutation of the input rows permutes the output identically. Ties in
    the nearest-centroid assignment break to the lowest cluster id; empty
    clusters are repaired by reassigning the point farthest from its
    centroid. Deterministic for fixed (points, k, seed).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] < 1:
        raise ValueError("points must be a 2-D array")
    n = len(points)
    if not 1 <= k <= n:
        raise ValueError(f"cluster count {k} not in [1, {n}]")
    if k == 1:
        return np.zeros(n, dtype=np.int64)

    order = np.lexsort(points.T[::-1])  # primary key: column 0
    pts = points[order]
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(pts, k, rng)

    labels = None
    for _ in range(KMEANS_MAX_ITER):
        d2 = _squared_distances(pts, centers)
        new_labels = np.argmin(d2, axis=1)
        new_labels = _repair_empty(new_labels, d2[np.arange(n), new_labels], k)
        for j in range(k):
            members = pts[new_labels == j]
            centers[j] = members.mean(axis=0)
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels

    out = np.empty(n, dtype=np.int64)
    out[order] = labels
    return out


def _weighted_median_side(t: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Boolean mask of the strict upper side of the weighted median of ``t``.

    The median element itself stays on the lower side, so both sides are
    nonempty whenever ``t`` has at least two distinct values. With all
    values identical one point is peeled off so the split still progresses.
    """
    order = np.argsort(t, kind="stable")
    cum = np.cumsum(weights[order])
    median = t[order[np.searchsorted(cum, 0.5 * cum[-1])]]
    side = t > median
    if not side.any():
        side = np.zeros(len(t), dtype=bool)
        side[int(np.argmax(t))] = True
    return side


def _canonical_frame(points: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted principal axes by decreasing variance, each oriented so the
    weighted third moment along it is nonnegative."""
    mu = weights @ points / weights.sum()
    centered = points - mu
    cov = (weights[:, None] * centered).T @ centered
    _, axes = np.linalg.eigh(cov)
    axes = axes[:, ::-1].copy()
    for c in range(axes.shape[1]):
        if (weights * (centered @ axes[:, c]) ** 3).sum() < 0.0:
            axes[:, c] = -axes[:, c]
    return axes


def _cluster_spread(proj: np.ndarray, weights: np.ndarray, labels: np.ndarray,
                    n_clusters: int) -> np.ndarray:
    """Weighted sum of squared deviations from the centroid, per cluster."""
    spread = np.zeros(n_clusters)
    for j in range(n_clusters):
        members = labels == j
        wm = weights[members]
        mu = wm @ proj[members] / wm.sum()
        spread[j] = (wm[:, None] * (proj[members] - mu) ** 2).sum()
    return spread


def divisive_cluster(points: np.ndarray, k: int, weights=None) -> np.ndarray:
    """Deterministic divisive clustering by recursive weighted-median splits.

    Points are projected once onto their weighted principal axes; each round
    splits every current cluster at its weighted median along the next axis
    in rotation (largest-spread clusters first once fewer than a full round
    of splits remains). Every decision is a function of integral quantities
    of the point set (covariance, medians), so the partition barely moves
    when the same surface is triangulated differently. Rows are processed
    in lexicographic order and the projections are rounded well below any
    geometric scale, which makes the output exactly independent of the
    input row order.

    ``weights`` (e.g. vertex areas) bias medians and spreads so the
    partition tracks surface area rather than vertex density; omitted, all
    points count equally.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] == 0:
        raise ValueError("points must be a nonempty 2-D array")
    n = points.shape[0]
    k = int(k)
    if not 1 <= k <= n:
        raise ValueError(f"cluster count {k} not in [1, {n}]")
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (n,) or not (w > 0.0).all():
            raise ValueError("weights must be positive, one per point")
        w = w / w.sum()
    # Rounding drops accumulation-order noise inherited from upstream sums
    # (vertex areas, position normalization) without touching structure.
    w = np.maximum(np.round(w, 12), 1e-12)

    order = np.lexsort(points.T[::-1])  # primary key: column 0
    pts = points[order]
    w_sorted = w[order]
    proj = np.round(pts @ _canonical_frame(pts, w_sorted), 9)

    labels = np.zeros(n, dtype=np.int64)
    n_clusters = 1
    rounds = 0
    while n_clusters < k:
        axis = rounds % proj.shape[1]
        if 2 * n_clusters <= k:
            targets = np.arange(n_clusters)
        else:
            spread = _cluster_spread(proj, w_sorted, labels, n_clusters)
            targets = np.argsort(-spread, kind="stable")[: k - n_clusters]
        new_labels = labels.copy()
        added = 0
        for j in targets:
            members = np.flatnonzero(labels == j)
            if len(members) < 2:
                continue
            side = _weighted_median_side(proj[members, axis], w_sorted[members])
            new_labels[members[side]] = n_clusters + added
            added += 1
        if added == 0:
            # every targeted cluster was a singleton; split the largest one
            sizes = np.bincount(labels, minlength=n_clusters)
            members = np.flatnonzero(labels == int(np.argmax(sizes)))
            side = _weighted_median_side(proj[members, axis], w_sorted[members])
            new_labels[members[side]] = n_clusters
            added = 1
        labels = new_labels
        n_clusters += added
        rounds += 1

    out = np.empty(n, dtype=np.int64)
    out[order] = labels
    return out


@dataclass
class HierarchyLevel:
    cluster_count: int
    mask: np.ndarray  # (n,), entries in [0, cluster_count)


@dataclass
class PoolingHierarchy:
    """Per-level cluster masks with strictly decreasing cluster counts."""

    levels: list[HierarchyLevel]

    @property
    def cluster_counts(self) -> tuple[int, ...]:
        return tuple(level.cluster_count for level in self.levels)

    def validate(self) -> None:
        counts = self.cluster_counts
        if any(b >= a for a, b in zip(counts, counts[1:])):
            raise ValueError(f"cluster counts must strictly decrease, got {counts}")
        for level in self.levels:
            present = np.unique(level.mask)
            if len(present) != level.cluster_count or present[0] != 0 or present[-1] != level.cluster_count - 1:
                raise ValueError(f"mask does not cover all {level.cluster_count} cluster ids")


def build_hierarchy(
    basis: SpectralBasis,
    cluster_counts,
    seed=0,
    n_eigenvectors: int = 16,
    include_constant: bool = False,
    embedding: str = "spatial",
    positions: np.ndarray = None,
    areas: np.ndarray = None,
) -> PoolingHierarchy:
    """Cluster vertices once per level of the pooling hierarchy.

    ``embedding`` selects the clustered representation. ``"spatial"`` (the
    default) clusters on normalized vertex positions, which stays stable
    when the same surface is retriangulated; ``"abs"`` uses the absolute
    eigenvector feature block fed to the network and ``"signed"`` the raw
    eigenvectors, both of which can rotate within near-degenerate
    eigenspaces across a remesh. Vertex ``areas``, when given, weight the
    splits so the partition tracks surface area rather than vertex
    density. ``seed`` is accepted for interface stability; the divisive
    splitter is deterministic and ignores it.
    """
    counts = tuple(int(c) for c in cluster_counts)
    if not counts:
        raise ValueError("need at least one cluster count")
    if any(b >= a for a, b in zip(counts, counts[1:])):
        raise ValueError(f"cluster counts must strictly decrease, got {counts}")
    if embedding == "spatial":
        if positions is None:
            raise ValueError("spatial clustering needs vertex positions")
        feats = np.asarray(positions, dtype=np.float64)
    elif embedding == "signed":
        first = 0 if include_constant else 1
        feats = basis.eigenvectors[:, first : first + n_eigenvectors]
        if feats.shape[1] != n_eigenvectors:
            raise ValueError(f"basis has too few modes for {n_eigenvectors} features")
    elif embedding == "abs":
        feats = eigenvector_features(basis, n_eigenvectors, include_constant)
    else:
        raise ValueError(f"unknown clustering embedding {embedding!r}")
    if feats.shape[0] != basis.eigenvectors.shape[0]:
        raise ValueError("embedding rows do not match the eigenvector basis")
    if max(counts) > feats.shape[0]:
        raise ValueError("more clusters than vertices")
    levels = [
        HierarchyLevel(cluster_count=p, mask=divisive_cluster(feats, p, weights=areas))
        for p in counts
    ]
    hierarchy = PoolingHierarchy(levels)
    hierarchy.validate()
    return hierarchy


def cluster_agreement(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """Fraction of entries on which two cluster masks agree, after the
    cluster ids are matched by maximum-overlap assignment."""
    mask_a = np.asarray(mask_a)
    mask_b = np.asarray(mask_b)
    if mask_a.shape != mask_b.shape:
        raise ValueError("masks must have equal length")
    pa = int(mask_a.max()) + 1
    pb = int(mask_b.max()) + 1
    overlap = np.zeros((pa, pb), dtype=np.int64)
    np.add.at(overlap, (mask_a, mask_b), 1)
    rows, cols = linear_sum_assignment(-overlap)
    return float(overlap[rows, cols].sum()) / len(mask_a)
