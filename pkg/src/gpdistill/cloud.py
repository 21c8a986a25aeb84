"""Point clouds: data model, CSV/PLY ingestion, normals and voxel downsampling."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import EmptyCloudError, MalformedInputError, ParameterError

DEFAULT_COLOR = (128.0, 128.0, 128.0)
DEFAULT_LEAF_SIZE = 0.01


@dataclass(frozen=True)
class Point3:
    """A single colored point with an optional unit normal."""

    position: np.ndarray
    color: np.ndarray
    normal: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        object.__setattr__(self, "color", np.asarray(self.color, dtype=float))
        if not np.all(np.isfinite(self.position)):
            raise ParameterError("point position must be finite")
        if self.normal is not None:
            n = np.asarray(self.normal, dtype=float)
            if abs(np.linalg.norm(n) - 1.0) > 1e-6:
                raise ParameterError("normal must have unit length")
            object.__setattr__(self, "normal", n)


@dataclass
class PointCloud:
    """Struct-of-arrays point cloud.

    ``positions`` is (N, 3) in meters, ``colors`` is (N, 3) on the 0-255
    scale and ``normals`` is either None or (N, 3) unit vectors.
    """

    positions: np.ndarray
    colors: np.ndarray | None = None
    normals: np.ndarray | None = None
    frame_id: str = ""

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        n = len(self.positions)
        if self.colors is None:
            self.colors = np.tile(np.asarray(DEFAULT_COLOR), (n, 1))
        else:
            self.colors = np.asarray(self.colors, dtype=float).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if len(self.normals) != n:
                raise ParameterError("normals length does not match positions")
        if len(self.colors) != n:
            raise ParameterError("colors length does not match positions")
        if not np.all(np.isfinite(self.positions)):
            raise ParameterError("point positions must be finite")

    def __len__(self):
        return len(self.positions)

    def __getitem__(self, i) -> Point3:
        normal = None if self.normals is None else self.normals[i]
        return Point3(self.positions[i], self.colors[i], normal)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def select(self, index) -> "PointCloud":
        """Sub-cloud by boolean mask or integer index array."""
        normals = None if self.normals is None else self.normals[index]
        return PointCloud(self.positions[index], self.colors[index], normals, self.frame_id)

    @classmethod
    def from_points(cls, points, frame_id=""):
        points = list(points)
        pos = np.array([p.position for p in points], dtype=float).reshape(-1, 3)
        col = np.array([p.color for p in points], dtype=float).reshape(-1, 3)
        normals = None
        if points and all(p.normal is not None for p in points):
            normals = np.array([p.normal for p in points], dtype=float)
        return cls(pos, col, normals, frame_id)


@dataclass
class VoxelGrid:
    """Occupied voxels with one representative point each.

    Cells are stored sorted lexicographically by integer key so that
    downstream index sets are reproducible.
    """

    leaf_size: float
    keys: np.ndarray
    positions: np.ndarray
    colors: np.ndarray
    normals: np.ndarray | None = None
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if not self.leaf_size > 0:
            raise ParameterError("leaf_size must be > 0")
        self.keys = np.asarray(self.keys, dtype=np.int64).reshape(-1, 3)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=float).reshape(-1, 3)
        if self.counts is None:
            self.counts = np.ones(len(self.keys), dtype=np.int64)

    def __len__(self):
        return len(self.keys)

    @property
    def cells(self) -> dict:
        """Map from integer 3-index to representative :class:`Point3`."""
        out = {}
        for i, key in enumerate(map(tuple, self.keys.tolist())):
            normal = None if self.normals is None else self.normals[i]
            out[key] = Point3(self.positions[i], self.colors[i], normal)
        return out

    def to_cloud(self, frame_id="") -> PointCloud:
        return PointCloud(self.positions.copy(), self.colors.copy(),
                          None if self.normals is None else self.normals.copy(), frame_id)


# --------------------------------------------------------------------------
# I/O


def _parse_float_row(tokens, lineno, path):
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise MalformedInputError(f"non-numeric field in {tokens!r}", lineno, path) from None


def _load_csv(path):
    rows = []
    with open(path) as fh:
        first_data = True
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            tokens = [t.strip() for t in line.split(",")]
            if first_data:
                first_data = False
                try:
                    [float(t) for t in tokens]
                except ValueError:
                    # header line
                    continue
            if len(tokens) not in (3, 6):
                raise MalformedInputError(f"expected 3 or 6 fields, got {len(tokens)}", lineno, path)
            rows.append(_parse_float_row(tokens, lineno, path))
    if not rows:
        raise EmptyCloudError(f"{path}: no points")
    width = {len(r) for r in rows}
    if len(width) != 1:
        raise MalformedInputError("mixed rows with and without color", None, path)
    arr = np.array(rows, dtype=float)
    colors = arr[:, 3:6] if arr.shape[1] == 6 else None
    return arr[:, :3], colors


def _load_ply(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MalformedInputError("missing 'ply' magic", 1, path)
    n_vertices = None
    props = []
    in_vertex = False
    end = None
    for lineno, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok:
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise MalformedInputError("only ASCII PLY is supported", lineno, path)
        elif tok[0] == "element":
            in_vertex = len(tok) == 3 and tok[1] == "vertex"
            if in_vertex:
                try:
                    n_vertices = int(tok[2])
                except ValueError:
                    raise MalformedInputError("bad vertex count", lineno, path) from None
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            end = lineno
            break
    if end is None or n_vertices is None:
        raise MalformedInputError("incomplete PLY header", None, path)
    if n_vertices == 0:
        raise EmptyCloudError(f"{path}: PLY has 0 vertices")
    for name in ("x", "y", "z"):
        if name not in props:
            raise MalformedInputError(f"missing vertex property {name}", end, path)
    has_color = all(c in props for c in ("red", "green", "blue"))
    body = [(i, l) for i, l in enumerate(lines[end:], start=end + 1) if l.strip()]
    if len(body) < n_vertices:
        raise MalformedInputError(f"expected {n_vertices} vertices, found {len(body)}", None, path)
    rows = []
    for lineno, raw in body[:n_vertices]:
        tok = raw.split()
        if len(tok) < len(props):
            raise MalformedInputError("too few vertex fields", lineno, path)
        rows.append(_parse_float_row(tok[:len(props)], lineno, path))
    arr = np.array(rows, dtype=float)
    pos = arr[:, [props.index("x"), props.index("y"), props.index("z")]]
    colors = None
    if has_color:
        colors = arr[:, [props.index("red"), props.index("green"), props.index("blue")]]
    return pos, colors


def load_cloud(path, format=None) -> PointCloud:
    """Read a cloud from ``csv`` or ``ply-ascii``; format inferred from suffix when omitted."""
    path = Path(path)
    if format is None:
        format = "ply-ascii" if path.suffix.lower() == ".ply" else "csv"
    if format == "csv":
        pos, colors = _load_csv(path)
    elif format in ("ply", "ply-ascii"):
        pos, colors = _load_ply(path)
    else:
        raise ParameterError(f"unknown cloud format {format!r}")
    if not np.all(np.isfinite(pos)):
        raise MalformedInputError("non-finite coordinates", None, path)
    return PointCloud(pos, colors, frame_id=path.stem)


def save_cloud(cloud: PointCloud, path, format=None):
    path = Path(path)
    if format is None:
        format = "ply-ascii" if path.suffix.lower() == ".ply" else "csv"
    colors = np.clip(np.rint(cloud.colors), 0, 255).astype(int)
    if format == "csv":
        with open(path, "w") as fh:
            fh.write("x,y,z,r,g,b\n")
            for p, c in zip(cloud.positions, colors):
                fh.write(f"{p[0]:.9f},{p[1]:.9f},{p[2]:.9f},{c[0]},{c[1]},{c[2]}\n")
    elif format in ("ply", "ply-ascii"):
        with open(path, "w") as fh:
            fh.write("ply\nformat ascii 1.0\n")
            fh.write(f"element vertex {len(cloud)}\n")
            fh.write("property float x\nproperty float y\nproperty float z\n")
            fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
            fh.write("end_header\n")
            for p, c in zip(cloud.positions, colors):
                fh.write(f"{p[0]:.9f} {p[1]:.9f} {p[2]:.9f} {c[0]} {c[1]} {c[2]}\n")
    else:
        raise ParameterError(f"unknown cloud format {format!r}")


# --------------------------------------------------------------------------
# Geometry


def estimate_normals(cloud: PointCloud, k=12, viewpoint=(0.0, 0.0, 0.0)) -> PointCloud:
    """Unit normals from the k-NN covariance, oriented toward ``viewpoint``."""
    n = len(cloud)
    if k < 3:
        raise ParameterError("k must be >= 3")
    if k > n:
        raise ParameterError(f"k={k} exceeds point count {n}")
    pos = cloud.positions
    _, idx = cKDTree(pos).query(pos, k=k)
    nbrs = pos[idx]
    centered = nbrs - nbrs.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    to_view = np.asarray(viewpoint, dtype=float) - pos
    flip = np.einsum("ij,ij->i", normals, to_view) < 0
    normals[flip] *= -1
    return PointCloud(pos.copy(), cloud.colors.copy(), normals, cloud.frame_id)


def _unit_rows(v):
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    return v / np.where(norms > 0, norms, 1.0)


def voxel_downsample(cloud: PointCloud | VoxelGrid, leaf_size=DEFAULT_LEAF_SIZE) -> VoxelGrid:
    """Average points falling into each ``leaf_size`` cube."""
    if not leaf_size > 0:
        raise ParameterError("leaf_size must be > 0")
    pos = cloud.positions
    if len(pos) == 0:
        return VoxelGrid(leaf_size, np.empty((0, 3)), np.empty((0, 3)), np.empty((0, 3)))
    keys = np.floor(pos / leaf_size).astype(np.int64)
    uniq, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    k = len(uniq)

    def cell_mean(values):
        out = np.zeros((k, values.shape[1]))
        for d in range(values.shape[1]):
            out[:, d] = np.bincount(inv, weights=values[:, d], minlength=k)
        return out / counts[:, None]

    centroids = cell_mean(pos)
    # keep the centroid inside its own cell under floating-point rounding
    lo = uniq * leaf_size
    centroids = np.clip(centroids, lo, np.nextafter(lo + leaf_size, lo))
    colors = cell_mean(cloud.colors)
    normals = None
    if cloud.normals is not None:
        mean_n = cell_mean(cloud.normals)
        norms = np.linalg.norm(mean_n, axis=1)
        degenerate = norms < 1e-9
        if np.any(degenerate):
            # opposing normals cancel: fall back to the first member's normal
            first = np.full(k, -1)
            first[inv[::-1]] = np.arange(len(inv))[::-1]
            mean_n[degenerate] = cloud.normals[first[degenerate]]
        normals = _unit_rows(mean_n)
    return VoxelGrid(leaf_size, uniq, centroids, colors, normals, counts)
