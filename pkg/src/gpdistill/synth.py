"""Seeded synthetic tabletop RGB-D scenes with ground truth.

Objects (boxes, spheres, cylinders and squashed "rubble" ellipsoids for the
background class) rest on a table plane at z = 0.  Surface points carry the object's albedo; the
rendered frame is shaded with a fixed light so that thumbnails show
shape-dependent gradients.  All randomness derives from ``SceneSpec.seed``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraModel, look_at, points_to_bbox, project_points
from .cloud import PointCloud
from .exceptions import SceneSpecError

SHAPES = ("box", "sphere", "cylinder")
FAMILIES = {
    "warm": (205.0, 70.0, 45.0),
    "cool": (45.0, 90.0, 205.0),
    "green": (60.0, 180.0, 70.0),
    "yellow": (215.0, 195.0, 50.0),
}
BACKGROUND_COLOR = (125.0, 115.0, 100.0)
PLANE_COLOR = (185.0, 175.0, 155.0)
FRAME_BACKGROUND = (30, 30, 30)
LIGHT_DIR = np.array([0.3, -0.5, 0.81]) / np.linalg.norm([0.3, -0.5, 0.81])


def class_roster(n_classes=6):
    """``["background", "<family>_<shape>", ...]`` with ``n_classes`` object classes."""
    names = [f"{fam}_{shape}" for fam in FAMILIES for shape in SHAPES]
    if not 1 <= n_classes <= len(names):
        raise SceneSpecError(f"n_classes must be in [1, {len(names)}]")
    return ["background"] + names[:n_classes]


def class_appearance(label, class_names):
    """(shape, family) for a class index; background is rubble."""
    name = class_names[label]
    if name == "background":
        return "rubble", None
    fam, shape = name.split("_")
    return shape, fam


def default_camera():
    R, t = look_at((0.0, -0.55, 0.6), (0.0, 0.0, 0.0))
    return CameraModel(525.0, 525.0, 319.5, 239.5, R, t, 640, 480)


@dataclass
class ObjectSpec:
    """``size``: box (sx, sy, sz); sphere (r,); cylinder (r, h); rubble semi-axes (a, b, c).

    ``pose`` is (x, y, z_base, yaw) with the object's lowest point at z_base.
    """

    shape: str
    size: tuple
    color: tuple
    pose: tuple
    label: int = 0

    def footprint_radius(self):
        if self.shape == "box":
            return 0.5 * float(np.hypot(self.size[0], self.size[1]))
        if self.shape == "rubble":
            return float(max(self.size[0], self.size[1]))
        return float(self.size[0])


@dataclass
class SceneSpec:
    object_specs: list
    camera: CameraModel = field(default_factory=default_camera)
    plane_extent: tuple = (0.35, 0.25)
    plane_color: tuple = PLANE_COLOR
    points_per_object: int = 1500
    plane_points: int = 20000
    noise_sigma: float = 0.002
    color_noise: float = 2.0
    seed: int = 0
    scene_id: str = "scene"

    def validate(self):
        if not self.object_specs:
            raise SceneSpecError("scene needs at least one object")
        if self.points_per_object < 1 or self.plane_points < 0:
            raise SceneSpecError("point counts must be positive")
        if self.noise_sigma < 0 or self.color_noise < 0:
            raise SceneSpecError("noise levels must be >= 0")
        for o in self.object_specs:
            if o.shape not in (*SHAPES, "rubble"):
                raise SceneSpecError(f"unknown shape {o.shape!r}")
            if o.pose[2] < 0:
                raise SceneSpecError("object rests below the table plane")
            if any(s <= 0 for s in o.size):
                raise SceneSpecError("object sizes must be positive")


@dataclass
class GroundTruth:
    point_object_ids: np.ndarray
    labels: list
    bboxes: list
    scene_id: str = ""

    def records(self, class_names=None):
        out = []
        for k, (label, box) in enumerate(zip(self.labels, self.bboxes)):
            rec = {"scene_id": self.scene_id, "object_id": k, "label": int(label),
                   "bbox": None if box is None else box.as_list()}
            if class_names is not None:
                rec["class_name"] = class_names[label]
            out.append(rec)
        return out


# --------------------------------------------------------------------------
# surface sampling


def _rotz(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def _sample_box(rng, n, sx, sy, sz):
    """Points and outward normals on a box's top and four sides (no bottom)."""
    faces = [  # (area, axis, sign)
        (sx * sy, 2, 1), (sx * sz, 1, 1), (sx * sz, 1, -1), (sy * sz, 0, 1), (sy * sz, 0, -1)]
    areas = np.array([f[0] for f in faces])
    which = rng.choice(len(faces), size=n, p=areas / areas.sum())
    half = np.array([sx, sy, sz]) / 2
    pts = rng.uniform(-half, half, size=(n, 3))
    normals = np.zeros((n, 3))
    for k, (_, axis, sign) in enumerate(faces):
        sel = which == k
        pts[sel, axis] = sign * half[axis]
        normals[sel, axis] = sign
    pts[:, 2] += sz / 2
    return pts, normals


def _sample_sphere(rng, n, r):
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * r + np.array([0, 0, r]), v


def _sample_ellipsoid(rng, n, a, b, c):
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    axes = np.array([a, b, c])
    normals = v / axes
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return v * axes + np.array([0, 0, c]), normals


def _sample_cylinder(rng, n, r, h):
    side, top = 2 * np.pi * r * h, np.pi * r * r
    on_top = rng.random(n) < top / (side + top)
    theta = rng.uniform(0, 2 * np.pi, n)
    pts = np.empty((n, 3))
    normals = np.zeros((n, 3))
    pts[:, 0] = r * np.cos(theta)
    pts[:, 1] = r * np.sin(theta)
    pts[:, 2] = rng.uniform(0, h, n)
    normals[:, 0], normals[:, 1] = np.cos(theta), np.sin(theta)
    rad = r * np.sqrt(rng.random(on_top.sum()))
    pts[on_top, 0] = rad * np.cos(theta[on_top])
    pts[on_top, 1] = rad * np.sin(theta[on_top])
    pts[on_top, 2] = h
    normals[on_top] = (0, 0, 1)
    return pts, normals


def _surface_area(o: ObjectSpec):
    if o.shape == "box":
        sx, sy, sz = o.size
        return sx * sy + 2 * sz * (sx + sy)
    if o.shape == "sphere":
        return 4 * np.pi * o.size[0] ** 2
    if o.shape == "rubble":
        # Knud Thomsen approximation
        a, b, c = (s ** 1.6 for s in o.size)
        return 4 * np.pi * ((a * b + a * c + b * c) / 3) ** (1 / 1.6)
    r, h = o.size
    return 2 * np.pi * r * h + np.pi * r * r


def sample_object(rng, o: ObjectSpec, n):
    if o.shape == "box":
        pts, normals = _sample_box(rng, n, *o.size)
    elif o.shape == "sphere":
        pts, normals = _sample_sphere(rng, n, o.size[0])
    elif o.shape == "rubble":
        pts, normals = _sample_ellipsoid(rng, n, *o.size)
    else:
        pts, normals = _sample_cylinder(rng, n, *o.size)
    R = _rotz(o.pose[3])
    offset = np.array([o.pose[0], o.pose[1], o.pose[2]])
    return pts @ R.T + offset, normals @ R.T


# --------------------------------------------------------------------------
# rendering


def render_frame(cam: CameraModel, positions, colors, normals, splat_px):
    """Z-buffered square splats with Lambertian shading; returns (H, W, 3) uint8."""
    img = np.empty((cam.height, cam.width, 3), dtype=np.uint8)
    img[:] = FRAME_BACKGROUND
    u, v, d = project_points(cam, positions)
    front = d > 1e-6
    shade = 0.55 + 0.45 * np.clip(normals @ LIGHT_DIR, 0, 1)
    col = np.clip(colors * shade[:, None], 0, 255)
    u, v, d, col, r = u[front], v[front], d[front], col[front], splat_px[front]
    ui = np.floor(u).astype(int)
    vi = np.floor(v).astype(int)
    all_pix, all_depth, all_idx = [], [], []
    rmax = int(r.max()) if len(r) else 0
    for du in range(-rmax, rmax + 1):
        for dv in range(-rmax, rmax + 1):
            sel = np.maximum(abs(du), abs(dv)) <= r
            uu, vv = ui[sel] + du, vi[sel] + dv
            ok = (uu >= 0) & (uu < cam.width) & (vv >= 0) & (vv < cam.height)
            idx = np.flatnonzero(sel)[ok]
            all_pix.append(vv[ok] * cam.width + uu[ok])
            all_depth.append(d[idx])
            all_idx.append(idx)
    if not all_pix:
        return img
    pix = np.concatenate(all_pix)
    depth = np.concatenate(all_depth)
    idx = np.concatenate(all_idx)
    # nearest splat wins: sort by pixel, then depth ascending, keep the first per pixel
    order = np.lexsort((idx, depth, pix))
    pix, idx = pix[order], idx[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    flat = img.reshape(-1, 3)
    flat[pix[first]] = np.rint(col[idx[first]]).astype(np.uint8)
    return img


def generate_scene(spec: SceneSpec):
    """Returns ``(cloud, frame, ground_truth)``; deterministic in ``spec.seed``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    cam = spec.camera
    pos_parts, col_parts, nrm_parts, ids, splat = [], [], [], [], []

    def spacing_px(area, n, pts):
        spacing = np.sqrt(area / max(n, 1))
        depth = np.maximum(project_points(cam, pts)[2], 1e-3)
        return np.maximum(1, np.ceil(0.75 * cam.fx * spacing / depth)).astype(int)

    ex, ey = spec.plane_extent
    n_plane = spec.plane_points
    plane_pts = np.column_stack([rng.uniform(-ex, ex, n_plane), rng.uniform(-ey, ey, n_plane),
                                 np.zeros(n_plane)])
    pos_parts.append(plane_pts)
    col_parts.append(np.tile(np.asarray(spec.plane_color, float), (n_plane, 1)))
    nrm_parts.append(np.tile([0.0, 0.0, 1.0], (n_plane, 1)))
    ids.append(np.full(n_plane, -1))
    splat.append(spacing_px(4 * ex * ey, n_plane, plane_pts))
    for k, o in enumerate(spec.object_specs):
        pts, nrm = sample_object(rng, o, spec.points_per_object)
        pos_parts.append(pts)
        col_parts.append(np.tile(np.asarray(o.color, float), (len(pts), 1)))
        nrm_parts.append(nrm)
        ids.append(np.full(len(pts), k))
        splat.append(spacing_px(_surface_area(o), len(pts), pts))
    clean = np.vstack(pos_parts)
    albedo = np.vstack(col_parts)
    normals = np.vstack(nrm_parts)
    object_ids = np.concatenate(ids)
    splat_px = np.concatenate(splat)

    positions = clean + rng.normal(scale=spec.noise_sigma, size=clean.shape) if spec.noise_sigma > 0 else clean
    colors = albedo + rng.normal(scale=spec.color_noise, size=albedo.shape) if spec.color_noise > 0 else albedo
    colors = np.clip(colors, 0, 255)
    frame = render_frame(cam, positions, colors, normals, splat_px)
    bboxes = [points_to_bbox(cam, positions[object_ids == k], source_cluster=k)
              for k in range(len(spec.object_specs))]
    gt = GroundTruth(object_ids, [o.label for o in spec.object_specs], bboxes, spec.scene_id)
    return PointCloud(positions, colors, None, spec.scene_id), frame, gt


# --------------------------------------------------------------------------
# random layouts


def _random_size(rng, shape):
    if shape == "box":
        return (rng.uniform(0.045, 0.09), rng.uniform(0.045, 0.09), rng.uniform(0.04, 0.09))
    if shape == "sphere":
        return (rng.uniform(0.028, 0.045),)
    if shape == "cylinder":
        return (rng.uniform(0.022, 0.035), rng.uniform(0.08, 0.14))
    return (rng.uniform(0.03, 0.05), rng.uniform(0.03, 0.05), rng.uniform(0.012, 0.022))


def random_scene_spec(seed, n_objects=5, n_classes=6, scene_id=None, min_gap=0.05,
                      region=(0.24, 0.15), color_jitter=35.0, **kw):
    """Random non-overlapping layout of ``n_objects`` objects drawn from the roster.

    Class 0 (background) appears as rubble in a neutral color.
    """
    rng = np.random.default_rng(seed)
    names = class_roster(n_classes)
    objects = []
    for _ in range(n_objects):
        label = int(rng.integers(0, len(names)))
        shape, fam = class_appearance(label, names)
        base = BACKGROUND_COLOR if fam is None else FAMILIES[fam]
        jitter = color_jitter * (0.5 if fam is None else 1.0)
        color = tuple(np.clip(np.asarray(base) + rng.uniform(-jitter, jitter, 3), 0, 255))
        size = _random_size(rng, shape)
        probe = ObjectSpec(shape, size, color, (0, 0, 0, 0), label)
        for _attempt in range(200):
            x, y = rng.uniform(-region[0], region[0]), rng.uniform(-region[1], region[1])
            r = probe.footprint_radius()
            if all(np.hypot(x - o.pose[0], y - o.pose[1]) > r + o.footprint_radius() + min_gap
                   for o in objects):
                break
        else:
            raise SceneSpecError("could not place objects without overlap")
        objects.append(ObjectSpec(shape, size, color, (x, y, 0.0, rng.uniform(0, np.pi)), label))
    return SceneSpec(objects, seed=int(rng.integers(2 ** 31)),
                     scene_id=scene_id or f"scene_{seed}", **kw)


def write_ground_truth(path, gt: GroundTruth, class_names=None):
    with open(path, "w") as fh:
        for rec in gt.records(class_names):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
