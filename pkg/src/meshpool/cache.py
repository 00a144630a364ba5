"""Per-mesh preprocessing pipeline and its on-disk cache.

Preprocessing (Laplacian assembly, eigensolve, clustering) dominates the
cost of working with a mesh, so the result is cached in one container file
per mesh. A cache is keyed by the mesh content hash and a fingerprint of
the preprocessing parameters; loading verifies both so a stale file can
never be silently reused after the mesh or the settings change.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict, field

import numpy as np

from .binio import read_container, write_container
from .mesh import Mesh, assemble_laplacian, compute_vertex_normals
from .spectral import build_hierarchy, build_input_features, normalize_positions, solve_eigs


class CacheMismatchError(ValueError):
    """Cached preprocessing does not match the requested mesh or settings."""


@dataclass(frozen=True)
class PreprocessParams:
    """Everything that influences the preprocessed features and masks."""

    n_eigenvectors: int = 16
    cluster_counts: tuple = (16, 8)
    seed: int = 0
    include_constant: bool = False
    cluster_on_signed: bool = False
    solver: str = "auto"

    def __post_init__(self):
        object.__setattr__(self, "cluster_counts", tuple(int(c) for c in self.cluster_counts))

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass
class FeatureCache:
    """Preprocessed network inputs for one mesh."""

    features: np.ndarray          # (N, 6 + n_eigenvectors)
    eigenvalues: np.ndarray       # (n_eigenvectors + 1,)
    level_masks: list = field(default_factory=list)  # [(N,) int64] per level
    cluster_counts: tuple = ()
    mesh_hash: str = ""
    params_fingerprint: str = ""

    @property
    def n_vertices(self) -> int:
        return self.features.shape[0]


def preprocess_mesh(mesh: Mesh, params: PreprocessParams) -> FeatureCache:
    """Run the full pipeline: normals, Laplacian, eigenpairs, clustering."""
    normals = compute_vertex_normals(mesh)
    op = assemble_laplacian(mesh)
    basis = solve_eigs(op, params.n_eigenvectors, method=params.solver)
    features = build_input_features(
        mesh, normals, basis,
        n_eigenvectors=params.n_eigenvectors,
        include_constant=params.include_constant,
    )
    hierarchy = build_hierarchy(
        basis, params.cluster_counts, params.seed,
        n_eigenvectors=params.n_eigenvectors,
        include_constant=params.include_constant,
        embedding="signed" if params.cluster_on_signed else "spatial",
        positions=normalize_positions(mesh.vertices),
        areas=op.areas,
    )
    return FeatureCache(
        features=features,
        eigenvalues=basis.eigenvalues.copy(),
        level_masks=[level.mask.copy() for level in hierarchy.levels],
        cluster_counts=hierarchy.cluster_counts,
        mesh_hash=mesh.content_hash(),
        params_fingerprint=params.fingerprint(),
    )


def _str_array(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).copy()


def _array_str(a: np.ndarray) -> str:
    return a.tobytes().decode("utf-8")


def save_cache(path, cache: FeatureCache) -> None:
    arrays = {
        "features": cache.features,
        "eigenvalues": cache.eigenvalues,
        "cluster_counts": np.asarray(cache.cluster_counts, dtype=np.int64),
        "mesh_hash": _str_array(cache.mesh_hash),
        "params_fingerprint": _str_array(cache.params_fingerprint),
    }
    for i, mask in enumerate(cache.level_masks):
        arrays[f"mask_{i}"] = np.asarray(mask, dtype=np.int64)
    write_container(path, arrays)


def load_cache(path, mesh: Mesh = None, params: PreprocessParams = None) -> FeatureCache:
    """Load a cache, checking it against ``mesh`` and ``params`` when given.

    Raises CacheMismatchError if the stored mesh hash or parameter
    fingerprint disagrees with what the caller expects.
    """
    arrays = read_container(path)
    counts = tuple(int(c) for c in arrays["cluster_counts"])
    cache = FeatureCache(
        features=arrays["features"],
        eigenvalues=arrays["eigenvalues"],
        level_masks=[arrays[f"mask_{i}"] for i in range(len(counts))],
        cluster_counts=counts,
        mesh_hash=_array_str(arrays["mesh_hash"]),
        params_fingerprint=_array_str(arrays["params_fingerprint"]),
    )
    if mesh is not None and cache.mesh_hash != mesh.content_hash():
        raise CacheMismatchError(f"{path}: cached features belong to a different mesh")
    if params is not None and cache.params_fingerprint != params.fingerprint():
        raise CacheMismatchError(f"{path}: cache built with different preprocessing parameters")
    return cache


def get_features(mesh: Mesh, params: PreprocessParams, cache_path=None) -> FeatureCache:
    """Load the cache when present and valid, otherwise compute and save it."""
    if cache_path is not None:
        try:
            return load_cache(cache_path, mesh=mesh, params=params)
        except (FileNotFoundError, ValueError):
            pass  # recompute below; ValueError covers container + mismatch errors
    cache = preprocess_mesh(mesh, params)
    if cache_path is not None:
        save_cache(cache_path, cache)
    return cache
