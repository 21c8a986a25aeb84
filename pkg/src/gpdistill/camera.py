"""Pinhole camera, 3D-to-2D projection, bounding boxes and thumbnail crops."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import BehindCameraError, MalformedInputError, ParameterError

MIN_DEPTH = 1e-9


@dataclass(frozen=True)
class CameraModel:
    """Ideal pinhole camera: ``d [u v 1]^T = K (R p + t)``.

    ``R`` and ``t`` map world coordinates into the camera frame.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    width: int = 640
    height: int = 480

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float).reshape(3, 3)
        t = np.asarray(self.t, dtype=float).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if not (self.fx > 0 and self.fy > 0):
            raise ParameterError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ParameterError("image size must be positive")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1) > 1e-6:
            raise ParameterError("R must be a proper rotation")

    @property
    def K(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @property
    def center(self):
        """Camera origin in world coordinates."""
        return -self.R.T @ self.t

    def to_json(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "R": [float(v) for v in self.R.ravel()], "t": [float(v) for v in self.t],
                "width": int(self.width), "height": int(self.height)}

    @classmethod
    def from_json(cls, d):
        try:
            return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                       np.asarray(d["R"], dtype=float).reshape(3, 3), np.asarray(d["t"], dtype=float),
                       int(d["width"]), int(d["height"]))
        except (KeyError, ValueError, TypeError) as exc:
            raise MalformedInputError(f"bad camera description: {exc}") from exc


def load_camera(path) -> CameraModel:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise MalformedInputError(exc.msg, exc.lineno, path) from None
    return CameraModel.from_json(data)


def save_camera(cam: CameraModel, path):
    with open(path, "w") as fh:
        json.dump(cam.to_json(), fh, indent=2, sort_keys=True)


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """(R, t) for a camera at ``eye`` looking at ``target`` (image y points down)."""
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=float))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return R, -R @ eye


# --------------------------------------------------------------------------
# projection


def project_points(cam: CameraModel, points):
    """Vectorized projection; returns ``(u, v, d)`` arrays without depth checks."""
    pc = np.asarray(points, dtype=float).reshape(-1, 3) @ cam.R.T + cam.t
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * pc[:, 0] / z + cam.cx
        v = cam.fy * pc[:, 1] / z + cam.cy
    return u, v, z


def project_point(cam: CameraModel, p_world):
    x, y, z = cam.R @ np.asarray(p_world, dtype=float) + cam.t
    if z <= MIN_DEPTH:
        raise BehindCameraError(f"point has camera depth {z:g}")
    return cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy, z


def unproject(cam: CameraModel, u, v, d):
    """World point(s) for pixel coordinates and camera depth."""
    u, v, d = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (u, v, d)))
    pc = np.stack([(u - cam.cx) * d / cam.fx, (v - cam.cy) * d / cam.fy, d], axis=-1)
    return (pc - cam.t) @ cam.R


# --------------------------------------------------------------------------
# boxes


@dataclass(frozen=True)
class BBox2D:
    """Inclusive pixel box; a 1x1 box has ``u_min == u_max``."""

    u_min: int
    v_min: int
    u_max: int
    v_max: int
    source_cluster: object = None

    @property
    def width(self):
        return self.u_max - self.u_min + 1

    @property
    def height(self):
        return self.v_max - self.v_min + 1

    @property
    def area(self):
        return self.width * self.height

    def as_list(self):
        return [int(self.u_min), int(self.v_min), int(self.u_max), int(self.v_max)]

    def is_valid(self, width, height):
        return 0 <= self.u_min <= self.u_max < width and 0 <= self.v_min <= self.v_max < height

    def union(self, other):
        return BBox2D(min(self.u_min, other.u_min), min(self.v_min, other.v_min),
                      max(self.u_max, other.u_max), max(self.v_max, other.v_max))

    def contains(self, other):
        return (self.u_min <= other.u_min and self.v_min <= other.v_min
                and self.u_max >= other.u_max and self.v_max >= other.v_max)


def points_to_bbox(cam: CameraModel, points, source_cluster=None, min_points=3):
    """Outward-rounded, image-clamped box around the in-front projections of ``points``."""
    u, v, d = project_points(cam, points)
    front = d > MIN_DEPTH
    if front.sum() < min_points:
        return None
    u, v = u[front], v[front]
    lo_u, hi_u, lo_v, hi_v = u.min(), u.max(), v.min(), v.max()
    # continuous extent clamped to the image; zero area means nothing visible
    span_u = min(hi_u, cam.width) - max(lo_u, 0.0)
    span_v = min(hi_v, cam.height) - max(lo_v, 0.0)
    if not (span_u > 0 and span_v > 0):
        return None
    u0 = max(0, math.floor(lo_u))
    v0 = max(0, math.floor(lo_v))
    u1 = min(cam.width - 1, math.ceil(hi_u))
    v1 = min(cam.height - 1, math.ceil(hi_v))
    return BBox2D(int(u0), int(v0), int(u1), int(v1), source_cluster)


def cluster_to_bbox(cam: CameraModel, cluster, grid, cluster_id=None):
    return points_to_bbox(cam, grid.positions[cluster.member_indices], cluster_id)


# --------------------------------------------------------------------------
# images and thumbnails


@dataclass
class Thumbnail:
    pixels: np.ndarray
    origin_bbox: BBox2D
    scene_id: str = ""


def crop_thumbnail(image, bbox: BBox2D, scene_id="") -> Thumbnail:
    image = np.asarray(image)
    h, w = image.shape[:2]
    if not bbox.is_valid(w, h):
        raise ParameterError(f"bbox {bbox.as_list()} outside {w}x{h} image")
    pixels = image[bbox.v_min:bbox.v_max + 1, bbox.u_min:bbox.u_max + 1].copy()
    return Thumbnail(pixels, bbox, scene_id)


def write_ppm(path, image):
    image = np.ascontiguousarray(np.clip(image, 0, 255).astype(np.uint8))
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise MalformedInputError("truncated PPM header", path=path)
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P6":
        raise MalformedInputError("only binary P6 PPM is supported", 1, path)
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise MalformedInputError("only 8-bit PPM is supported", path=path)
    body = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return body.reshape(h, w, 3).copy()


# --------------------------------------------------------------------------
# annotation records


@dataclass
class Annotation:
    scene_id: str
    bbox: BBox2D
    cluster_id: int
    label: int | None = None
    probs: list | None = None

    def to_json(self):
        rec = {"scene_id": self.scene_id, "bbox": self.bbox.as_list(), "cluster_id": int(self.cluster_id)}
        if self.label is not None:
            rec["label"] = int(self.label)
        if self.probs is not None:
            rec["probs"] = [float(p) for p in self.probs]
        return rec

    @classmethod
    def from_json(cls, d):
        return cls(str(d["scene_id"]), BBox2D(*d["bbox"], source_cluster=d["cluster_id"]),
                   int(d["cluster_id"]), d.get("label"), d.get("probs"))


def write_jsonl(path, records):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json() if hasattr(r, "to_json") else r, sort_keys=True) + "\n")


def read_jsonl(path):
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise MalformedInputError(exc.msg, lineno, path) from None
    return out


def read_annotations(path):
    return [Annotation.from_json(d) for d in read_jsonl(path)]
