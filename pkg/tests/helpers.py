"""Reference implementations used as test oracles."""
import itertools

import numpy as np

from gpdistill.cloud import VoxelGrid
from gpdistill.objectness import ConnectabilityParams, connectability
from gpdistill.teacher import elbo_and_grad, init_svgp


class UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, i):
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, i, j):
        ri, rj = self.find(i), self.find(j)
        if ri != rj:
            self.parent[max(ri, rj)] = min(ri, rj)


def brute_force_partition(grid: VoxelGrid, params=ConnectabilityParams(), min_cluster_size=1):
    """All-pairs connectability + union-find; returns a set of frozensets of voxel indices."""
    cells = [grid.cells[tuple(k)] for k in grid.keys.tolist()]
    uf = UnionFind(len(cells))
    for i, j in itertools.combinations(range(len(cells)), 2):
        if connectability(cells[i], cells[j], params).connected:
            uf.union(i, j)
    groups = {}
    for i in range(len(cells)):
        groups.setdefault(uf.find(i), set()).add(i)
    return {frozenset(g) for g in groups.values() if len(g) >= min_cluster_size}


def dense_connectability(grid: VoxelGrid, params=ConnectabilityParams()):
    """Boolean (N, N) matrix of the connectability rule over every pair of cells.

    Written directly from the cue definitions with full broadcasting, so it
    shares no code with the neighbor search used by the library.
    """
    pos, col, nrm = grid.positions, grid.colors, grid.normals
    dist = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
    if params.grayscale:
        gray = col @ np.array([0.299, 0.587, 0.114])
        cdist = np.abs(gray[:, None] - gray[None])
    else:
        cdist = np.linalg.norm(col[:, None] - col[None], axis=-1)
    unit = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
    angle = np.degrees(np.arccos(np.clip(unit @ unit.T, -1.0, 1.0)))
    c_d = np.clip((params.sigma_d - dist) / params.sigma_d, 0, 1)
    c_c = np.clip((params.sigma_c - cdist) / params.sigma_c, 0, 1)
    c_s = np.clip((params.sigma_s - angle) / params.sigma_s, 0, 1)
    out = (c_d > 0) & ((c_c > 0) | (c_s > 0))
    np.fill_diagonal(out, False)
    return out


def dense_brute_force_partition(grid: VoxelGrid, params=ConnectabilityParams(), min_cluster_size=1):
    """Union-find over every connectable pair from :func:`dense_connectability`."""
    conn = dense_connectability(grid, params)
    uf = UnionFind(len(grid))
    for i, j in np.argwhere(np.triu(conn, 1)).tolist():
        uf.union(i, j)
    groups = {}
    for i in range(len(grid)):
        groups.setdefault(uf.find(i), set()).add(i)
    return {frozenset(g) for g in groups.values() if len(g) >= min_cluster_size}


def random_voxel_grid(rng, max_voxels=500, leaf=0.01):
    """Random occupied cells with clustered colors and normals so every cue matters."""
    n = int(rng.integers(1, max_voxels + 1))
    side = int(rng.integers(4, 14))
    flat = rng.choice(side ** 3, size=min(n, side ** 3), replace=False)
    keys = np.column_stack(np.unravel_index(np.sort(flat), (side,) * 3))
    pos = (keys + rng.uniform(0.05, 0.95, keys.shape)) * leaf
    palette = rng.uniform(0, 255, (3, 3))
    colors = palette[rng.integers(0, 3, len(keys))] + rng.normal(0, 4, (len(keys), 3))
    dirs = rng.normal(size=(3, 3))
    normals = dirs[rng.integers(0, 3, len(keys))] + rng.normal(0, 0.1, (len(keys), 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return VoxelGrid(leaf, keys, pos, np.clip(colors, 0, 255), normals)


def partition_of(clusters):
    return {frozenset(c.member_indices.tolist()) for c in clusters}


def random_instance(rng, n=None, m=None, C=None, ard=False):
    n = n or int(rng.integers(2, 9))
    m = m or int(rng.integers(1, 5))
    C = C or int(rng.integers(2, 4))
    D = int(rng.integers(1, 4))
    X = rng.normal(size=(n, D))
    y = rng.integers(0, C, n)
    model = init_svgp(X, C, m, lengthscale=rng.uniform(0.5, 2.0), variance=rng.uniform(0.5, 2.0),
                      ard=ard, seed=int(rng.integers(1000)))
    p = {k: np.array(v, dtype=float) for k, v in model.params().items()}
    p["Z"] = p["Z"] + rng.normal(0, 0.3, p["Z"].shape)
    p["q_mu"] = rng.normal(0, 0.5, p["q_mu"].shape)
    p["q_tril"] = np.tril(rng.normal(0, 0.3, p["q_tril"].shape))
    if ard:
        p["log_ls"] = p["log_ls"] + rng.normal(0, 0.2, p["log_ls"].shape)
    return p, X, y


def finite_difference(p, X, y, total_n, eps, h=1e-6):
    grads = {}
    for key, val in p.items():
        g = np.zeros_like(val)
        for idx in np.ndindex(val.shape):
            if key == "q_tril" and idx[-2] < idx[-1]:
                continue
            old = val[idx]
            val[idx] = old + h
            up, _ = elbo_and_grad(p, X, y, total_n, eps=eps, need_grad=False)
            val[idx] = old - h
            down, _ = elbo_and_grad(p, X, y, total_n, eps=eps, need_grad=False)
            val[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads[key] = g
    return grads
