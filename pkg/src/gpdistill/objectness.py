"""Model-free 3D objectness: RANSAC plane removal and multi-cue conditional clustering.

Two voxels are *connectable* when they are close (distance cue) and either
their colors or their surface orientations agree.  Each cue is a
normalized margin ``clamp01((sigma - measured) / sigma)`` so that ``sigma``
acts as a hard cutoff.  Clusters are the connected components of the
connectability graph over the voxel grid.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin

from .cloud import (DEFAULT_LEAF_SIZE, Point3, PointCloud, VoxelGrid, estimate_normals,
                    voxel_downsample)
from .exceptions import ParameterError, StateError

_GRAY = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class ConnectabilityParams:
    sigma_d: float = 0.02
    sigma_c: float = 8.0
    sigma_s: float = 10.0
    grayscale: bool = False

    def __post_init__(self):
        if not (self.sigma_d > 0 and self.sigma_c > 0 and self.sigma_s > 0):
            raise ParameterError("connectability thresholds must be strictly positive")


@dataclass
class PlaneModel:
    normal: np.ndarray
    offset: float
    inlier_indices: np.ndarray

    def distance(self, positions):
        return np.abs(positions @ self.normal - self.offset)


@dataclass
class Cluster3D:
    member_indices: np.ndarray
    centroid: np.ndarray
    aabb_min: np.ndarray
    aabb_max: np.ndarray

    def __len__(self):
        return len(self.member_indices)

    def to_json(self, cluster_id=None):
        rec = {
            "centroid": [float(v) for v in self.centroid],
            "aabb": [[float(v) for v in self.aabb_min], [float(v) for v in self.aabb_max]],
            "member_count": int(len(self.member_indices)),
        }
        if cluster_id is not None:
            rec = {"cluster_id": cluster_id, **rec}
        return rec


class Connectability(NamedTuple):
    c_d: float
    c_c: float
    c_s: float
    connected: bool

    @property
    def fuzzy(self) -> float:
        """min/max reading of ``C_d AND (C_s OR C_c)``, for diagnostics."""
        return min(self.c_d, max(self.c_s, self.c_c))


# --------------------------------------------------------------------------
# plane removal


def _fit_plane_lsq(points):
    centroid = points.mean(axis=0)
    _, _, vt = np.linalg.svd(points - centroid, full_matrices=False)
    normal = vt[-1]
    return normal, float(normal @ centroid)


def _ransac_plane(pos, dist_thresh, iterations, rng, eval_size=2048, refine_rounds=3):
    n = len(pos)
    if n > eval_size:
        probe = pos[rng.choice(n, eval_size, replace=False)]
    else:
        probe = pos
    tri = rng.integers(0, n, size=(iterations, 3))
    a, b, c = pos[tri[:, 0]], pos[tri[:, 1]], pos[tri[:, 2]]
    normals = np.cross(b - a, c - a)
    norms = np.linalg.norm(normals, axis=1)
    ok = norms > 1e-12
    if not np.any(ok):
        return None
    normals = normals[ok] / norms[ok, None]
    offsets = np.einsum("ij,ij->i", normals, a[ok])
    scores = (np.abs(probe @ normals.T - offsets) <= dist_thresh).sum(axis=0)
    best = int(np.argmax(scores))
    normal, offset = normals[best], offsets[best]
    inliers = np.abs(pos @ normal - offset) <= dist_thresh
    for _ in range(refine_rounds):
        if inliers.sum() < 3:
            break
        rn, ro = _fit_plane_lsq(pos[inliers])
        refined = np.abs(pos @ rn - ro) <= dist_thresh
        if refined.sum() < 3:
            break
        normal, offset, inliers = rn, ro, refined
    return normal, offset, inliers


def remove_planes(cloud: PointCloud, dist_thresh=0.01, min_inlier_fraction=0.5, max_planes=3,
                  iterations=200, seed=0):
    """Strip dominant planes from ``cloud``.

    Returns ``(residual, planes)``.  Plane inlier indices refer to the input
    cloud.  A plane is removed only while its support is at least
    ``min_inlier_fraction`` of the points still remaining.
    """
    if len(cloud) < 3:
        raise ParameterError("plane removal needs at least 3 points")
    if not 0 < min_inlier_fraction <= 1:
        raise ParameterError("min_inlier_fraction must be in (0, 1]")
    if dist_thresh <= 0 or iterations < 1:
        raise ParameterError("dist_thresh and iterations must be positive")
    rng = np.random.default_rng(seed)
    remaining = np.arange(len(cloud))
    planes = []
    while len(planes) < max_planes and len(remaining) >= 3:
        found = _ransac_plane(cloud.positions[remaining], dist_thresh, iterations, rng)
        if found is None:
            break
        normal, offset, mask = found
        if mask.sum() < min_inlier_fraction * len(remaining):
            break
        if offset < 0:
            normal, offset = -normal, -offset
        planes.append(PlaneModel(normal, float(offset), remaining[mask]))
        remaining = remaining[~mask]
    return cloud.select(remaining), planes


# --------------------------------------------------------------------------
# connectability


def _margin(sigma, measured):
    return np.clip((sigma - measured) / sigma, 0.0, 1.0)


def _color_distance(c1, c2, grayscale):
    if grayscale:
        return np.abs((c1 - c2) @ _GRAY)
    return np.linalg.norm(c1 - c2, axis=-1)


def _normal_angle_deg(n1, n2):
    dot = np.sum(n1 * n2, axis=-1)
    denom = np.linalg.norm(n1, axis=-1) * np.linalg.norm(n2, axis=-1)
    return np.degrees(np.arccos(np.clip(dot / denom, -1.0, 1.0)))


def connectability(p1: Point3, p2: Point3, params=ConnectabilityParams()) -> Connectability:
    if p1.normal is None or p2.normal is None:
        raise StateError("connectability needs surface normals on both points")
    c_d = float(_margin(params.sigma_d, np.linalg.norm(p1.position - p2.position)))
    c_c = float(_margin(params.sigma_c, _color_distance(p1.color, p2.color, params.grayscale)))
    c_s = float(_margin(params.sigma_s, _normal_angle_deg(p1.normal, p2.normal)))
    return Connectability(c_d, c_c, c_s, bool(c_d > 0 and (c_c > 0 or c_s > 0)))


def connectable_pairs(grid: VoxelGrid, params=ConnectabilityParams()) -> np.ndarray:
    """All index pairs (i < j) of grid cells that satisfy ``connected``.

    Only pairs closer than ``sigma_d`` can pass the distance gate, so the
    candidate set from a radius search already covers the 26-neighborhood.
    """
    if grid.normals is None:
        raise StateError("grid representatives need normals")
    pos = grid.positions
    pairs = cKDTree(pos).query_pairs(params.sigma_d, output_type="ndarray")
    if len(pairs) == 0:
        return pairs.reshape(0, 2)
    i, j = pairs[:, 0], pairs[:, 1]
    c_d = _margin(params.sigma_d, np.linalg.norm(pos[i] - pos[j], axis=1))
    c_c = _margin(params.sigma_c, _color_distance(grid.colors[i], grid.colors[j], params.grayscale))
    c_s = _margin(params.sigma_s, _normal_angle_deg(grid.normals[i], grid.normals[j]))
    keep = (c_d > 0) & ((c_c > 0) | (c_s > 0))
    return pairs[keep]


def _make_cluster(grid, members):
    pts = grid.positions[members]
    return Cluster3D(members, pts.mean(axis=0), pts.min(axis=0), pts.max(axis=0))


def conditional_cluster(grid: VoxelGrid, params=ConnectabilityParams(), min_cluster_size=30):
    """Connected components of the connectability graph, largest first."""
    n = len(grid)
    if n == 0:
        return []
    pairs = connectable_pairs(grid, params)
    adj = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    order = np.argsort(labels, kind="stable")
    bounds = np.flatnonzero(np.diff(labels[order])) + 1
    clusters = [_make_cluster(grid, np.sort(m)) for m in np.split(order, bounds)
                if len(m) >= min_cluster_size]
    clusters.sort(key=lambda c: (-len(c), *c.centroid.tolist()))
    return clusters


def clusters_to_jsonl(clusters, path):
    with open(path, "w") as fh:
        for k, c in enumerate(clusters):
            fh.write(json.dumps(c.to_json(k)) + "\n")


# --------------------------------------------------------------------------
# estimator


class ObjectnessDetector(BaseEstimator, TransformerMixin):
    """Plane removal, voxelization, normal estimation and clustering in one object.

    The detector is model-free: ``fit`` only validates parameters.
    ``transform`` maps a sequence of clouds to a list of ``(grid, clusters)``.
    """

    def __init__(self, dist_thresh=0.01, min_inlier_fraction=0.5, max_planes=1,
                 ransac_iterations=200, leaf_size=DEFAULT_LEAF_SIZE, normal_k=12,
                 sigma_d=0.02, sigma_c=8.0, sigma_s=10.0, grayscale=False,
                 min_cluster_size=30, viewpoint=(0.0, 0.0, 0.0), seed=0):
        self.dist_thresh = dist_thresh
        self.min_inlier_fraction = min_inlier_fraction
        self.max_planes = max_planes
        self.ransac_iterations = ransac_iterations
        self.leaf_size = leaf_size
        self.normal_k = normal_k
        self.sigma_d = sigma_d
        self.sigma_c = sigma_c
        self.sigma_s = sigma_s
        self.grayscale = grayscale
        self.min_cluster_size = min_cluster_size
        self.viewpoint = viewpoint
        self.seed = seed

    @property
    def params_(self):
        return ConnectabilityParams(self.sigma_d, self.sigma_c, self.sigma_s, self.grayscale)

    def fit(self, X=None, y=None):
        self.params_  # validates thresholds
        if self.leaf_size <= 0:
            raise ParameterError("leaf_size must be > 0")
        return self

    def detect(self, cloud: PointCloud):
        """Return ``(grid, clusters, planes)`` for one cloud."""
        residual, planes = remove_planes(cloud, self.dist_thresh, self.min_inlier_fraction,
                                         self.max_planes, self.ransac_iterations, self.seed)
        grid = voxel_downsample(residual, self.leaf_size)
        if len(grid) < max(self.normal_k, 3):
            grid.normals = np.zeros((len(grid), 3))
            return grid, [], planes
        reps = estimate_normals(grid.to_cloud(), self.normal_k, self.viewpoint)
        grid.normals = reps.normals
        return grid, conditional_cluster(grid, self.params_, self.min_cluster_size), planes

    def transform(self, X):
        if isinstance(X, PointCloud):
            X = [X]
        return [self.detect(cloud)[:2] for cloud in X]
