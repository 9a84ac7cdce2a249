"""Procedural multi-view RGB-D renderer and dataset generator.

Objects are parametric solids (signed distance fields) sampled per class
from documented parameter ranges, normalized to fit inside the unit sphere,
and rendered by sphere tracing from an orbiting pinhole camera. Each view
is cropped around the object and rescaled ratio-preserving so its longer
side fills the output square, matching the front-end normalization used at
inference time. RGB backgrounds are black, depth backgrounds white.
"""

import csv
import io
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DatasetError, InvalidCameraError, UnknownClassError
from .imaging import (
    fit_object_crop,
    read_depth_png,
    read_mask_png,
    read_rgb_png,
    write_depth_png,
    write_mask_png,
    write_rgb_png,
)

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.txt"

DEFAULT_DISTANCE = 2.5
DEFAULT_FOV = 40.0
OBJECT_RADIUS = 0.8  # objects are rescaled to this bounding radius
SUPERSAMPLE = 2

CLASS_IDS = ("can", "mug", "bottle", "box", "table")

# single untextured color per class, blue-ish by default
CLASS_COLORS = {
    "can": (0.15, 0.25, 0.85),
    "mug": (0.15, 0.35, 0.80),
    "bottle": (0.10, 0.30, 0.90),
    "box": (0.20, 0.20, 0.85),
    "table": (0.25, 0.30, 0.75),
}

_HIT_EPS = 1e-4
_MAX_STEPS = 192


@dataclass(frozen=True)
class CameraPose:
    pitch: float
    yaw: float
    distance: float = DEFAULT_DISTANCE
    fov: float = DEFAULT_FOV


@dataclass
class ShapeInstance:
    class_id: str
    params: dict
    instance_seed: int

    def color(self):
        return CLASS_COLORS[self.class_id]


@dataclass
class ViewSample:
    rgb: np.ndarray    # [3,S,S] in [0,1], black background
    depth: np.ndarray  # [1,S,S] in [0,1], white background
    mask: np.ndarray   # [1,S,S] binary
    pose: CameraPose
    instance: ShapeInstance


# ---------------------------------------------------------------------------
# signed distance fields (y is up; p is [N,3])


def sdf_sphere(p, r):
    return np.linalg.norm(p, axis=-1) - r


def sdf_cylinder(p, r, half_h):
    """Capped vertical cylinder centered at the origin."""
    dxz = np.sqrt(p[..., 0] ** 2 + p[..., 2] ** 2) - r
    dy = np.abs(p[..., 1]) - half_h
    outside = np.sqrt(np.maximum(dxz, 0) ** 2 + np.maximum(dy, 0) ** 2)
    inside = np.minimum(np.maximum(dxz, dy), 0)
    return outside + inside


def sdf_box(p, half):
    q = np.abs(p) - np.asarray(half)
    outside = np.linalg.norm(np.maximum(q, 0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0)
    return outside + inside


def sdf_torus_x(p, major, minor):
    """Torus whose ring lies in the x-y plane (axis along z)."""
    q = np.sqrt(p[..., 0] ** 2 + p[..., 1] ** 2) - major
    return np.sqrt(q ** 2 + p[..., 2] ** 2) - minor


def _translate(p, offset):
    return p - np.asarray(offset)


def _class_params(class_id, rng):
    u = rng.uniform
    if class_id == "can":
        return {"radius": u(0.35, 0.55), "height": u(0.9, 1.5)}
    if class_id == "mug":
        return {"radius": u(0.35, 0.5), "height": u(0.7, 1.1),
                "handle_major": u(0.18, 0.28), "handle_minor": u(0.05, 0.09)}
    if class_id == "bottle":
        return {"radius": u(0.3, 0.45), "height": u(0.8, 1.2),
                "neck_radius": u(0.1, 0.18), "neck_height": u(0.3, 0.5)}
    if class_id == "box":
        return {"hx": u(0.25, 0.6), "hy": u(0.25, 0.6), "hz": u(0.25, 0.6)}
    if class_id == "table":
        return {"top_hx": u(0.45, 0.7), "top_hz": u(0.45, 0.7),
                "top_hy": u(0.04, 0.08), "leg_hw": u(0.04, 0.07), "leg_h": u(0.4, 0.7)}
    raise UnknownClassError(f"unknown object class {class_id!r}")


def _base_sdf_and_radius(class_id, prm):
    """Unscaled SDF plus an analytic bound on the shape's radius."""
    if class_id == "can":
        r, hh = prm["radius"], prm["height"] / 2

        def f(p):
            return sdf_cylinder(p, r, hh)
        return f, math.sqrt(r * r + hh * hh)

    if class_id == "mug":
        r, hh = prm["radius"], prm["height"] / 2
        hm, hn = prm["handle_major"], prm["handle_minor"]
        handle_center = (r + hm * 0.6, 0.0, 0.0)

        def f(p):
            body = sdf_cylinder(p, r, hh)
            handle = sdf_torus_x(_translate(p, handle_center), hm, hn)
            return np.minimum(body, handle)
        bound = max(math.sqrt(r * r + hh * hh), r + hm * 1.6 + hn)
        return f, bound

    if class_id == "bottle":
        r, hh = prm["radius"], prm["height"] / 2
        nr, nh = prm["neck_radius"], prm["neck_height"]

        def f(p):
            body = sdf_cylinder(p, r, hh)
            neck = sdf_cylinder(_translate(p, (0, hh + nh / 2, 0)), nr, nh / 2)
            shoulder = sdf_sphere(_translate(p, (0, hh, 0)), (r + nr) / 2)
            return np.minimum(np.minimum(body, neck), shoulder)
        bound = max(math.sqrt(r * r + hh * hh), hh + nh, hh + (r + nr) / 2)
        return f, bound

    if class_id == "box":
        half = (prm["hx"], prm["hy"], prm["hz"])

        def f(p):
            return sdf_box(p, half)
        return f, math.sqrt(sum(h * h for h in half))

    if class_id == "table":
        thx, thz, thy = prm["top_hx"], prm["top_hz"], prm["top_hy"]
        lhw, lh = prm["leg_hw"], prm["leg_h"]
        top_y = lh  # legs below, top sitting at height lh
        inset_x, inset_z = thx - lhw, thz - lhw

        def f(p):
            top = sdf_box(_translate(p, (0, top_y, 0)), (thx, thy, thz))
            # four legs, mirrored via |x|,|z|
            q = np.stack([np.abs(p[..., 0]) - inset_x,
                          p[..., 1] - lh / 2,
                          np.abs(p[..., 2]) - inset_z], axis=-1)
            legs = sdf_box(q, (lhw, lh / 2 + thy, lhw))
            return np.minimum(top, legs)
        bound = math.sqrt(thx * thx + thz * thz + (top_y + thy) ** 2)
        return f, bound

    raise UnknownClassError(f"unknown object class {class_id!r}")


def instance_sdf(inst):
    """SDF of the pose-normalized instance (bounding radius OBJECT_RADIUS)."""
    base, bound = _base_sdf_and_radius(inst.class_id, inst.params)
    s = OBJECT_RADIUS / bound

    def f(p):
        return base(p / s) * s
    return f


def make_instance(class_id, instance_seed):
    """Deterministic parameter sample; same (class, seed) -> same params."""
    if class_id not in CLASS_IDS:
        raise UnknownClassError(f"unknown object class {class_id!r}")
    rng = np.random.default_rng(
        np.random.SeedSequence([CLASS_IDS.index(class_id), int(instance_seed)]))
    return ShapeInstance(class_id=class_id, params=_class_params(class_id, rng),
                         instance_seed=int(instance_seed))


# ---------------------------------------------------------------------------
# camera and sphere tracing


def camera_rays(cam, size):
    """Origin plus unit ray directions [size,size,3]; row 0 is the top."""
    pitch = math.radians(cam.pitch)
    yaw = math.radians(cam.yaw)
    eye = cam.distance * np.array([
        math.cos(pitch) * math.sin(yaw),
        math.sin(pitch),
        math.cos(pitch) * math.cos(yaw),
    ])
    fwd = -eye / np.linalg.norm(eye)
    world_up = np.array([0.0, 1.0, 0.0])
    if abs(fwd @ world_up) > 0.999:  # looking straight down/up
        world_up = np.array([0.0, 0.0, 1.0])
    right = np.cross(fwd, world_up)
    right /= np.linalg.norm(right)
    up = np.cross(right, fwd)

    half = math.tan(math.radians(cam.fov) / 2)
    coords = (np.arange(size) + 0.5) / size * 2 - 1  # [-1, 1]
    u = coords[None, :] * half
    v = -coords[:, None] * half
    dirs = fwd[None, None] + u[..., None] * right[None, None] + v[..., None] * up[None, None]
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return eye, dirs


def render_sdf(sdf, cam, size):
    """Sphere-trace an SDF; returns (rgb [3,S,S], depth01 [1,S,S], mask [1,S,S]).

    Depth is linear in ray length: distance-1 maps to 0, distance+1 to 1,
    background exactly 1.
    """
    eye, dirs = camera_rays(cam, size)
    flat_dirs = dirs.reshape(-1, 3)
    n = flat_dirs.shape[0]
    t_near = max(cam.distance - 1.0, 0.0)
    t_far = cam.distance + 1.0

    t = np.full(n, t_near)
    alive = np.ones(n, dtype=bool)
    hit = np.zeros(n, dtype=bool)
    for _ in range(_MAX_STEPS):
        idx = np.nonzero(alive)[0]
        if idx.size == 0:
            break
        p = eye[None, :] + t[idx, None] * flat_dirs[idx]
        d = sdf(p)
        newly_hit = d < _HIT_EPS
        hit[idx[newly_hit]] = True
        alive[idx[newly_hit]] = False
        t[idx] += np.maximum(d, _HIT_EPS * 0.5)
        alive &= t < t_far
    hit &= t <= t_far

    depth = np.ones(n)
    depth[hit] = np.clip((t[hit] - (cam.distance - 1.0)) / 2.0, 0.0, 1.0)

    rgb = np.zeros((n, 3))
    if hit.any():
        ph = eye[None, :] + t[hit, None] * flat_dirs[hit]
        eps = 1e-4
        grad = np.stack([
            sdf(ph + (eps, 0, 0)) - sdf(ph - (eps, 0, 0)),
            sdf(ph + (0, eps, 0)) - sdf(ph - (0, eps, 0)),
            sdf(ph + (0, 0, eps)) - sdf(ph - (0, 0, eps)),
        ], axis=-1)
        norms = np.linalg.norm(grad, axis=-1, keepdims=True)
        normal = grad / np.maximum(norms, 1e-12)
        # fixed headlight plus ambient, no shadows
        lambert = np.maximum(-(normal * flat_dirs[hit]).sum(axis=-1), 0.0)
        shade = 0.25 + 0.75 * lambert
        rgb[hit] = shade[:, None]

    rgb = rgb.reshape(size, size, 3).transpose(2, 0, 1)
    depth = depth.reshape(1, size, size)
    mask = hit.reshape(1, size, size).astype(np.float64)
    return rgb, depth, mask


def rasterize(inst, cam, size):
    """Render one normalized training view of an instance.

    The raw frame is traced at 2x resolution, the object's bounding box is
    rescaled ratio-preserving so its longer side fills `size`, and the
    canvas is padded black (RGB) / white (depth).
    """
    if size < 16:
        raise InvalidCameraError(f"render size must be >= 16, got {size}")
    if cam.distance <= 1.0:
        raise InvalidCameraError(
            f"camera distance {cam.distance} is inside the unit object bound")
    sdf = instance_sdf(inst)
    shade, depth, mask = render_sdf(sdf, cam, size * SUPERSAMPLE)
    color = np.asarray(inst.color()).reshape(3, 1, 1)
    rgb = shade * color

    ys, xs = np.nonzero(mask[0] > 0.5)
    if ys.size == 0:
        return ViewSample(np.zeros((3, size, size)), np.ones((1, size, size)),
                          np.zeros((1, size, size)), cam, inst)
    y0, y1 = ys.min(), ys.max() + 1
    x0, x1 = xs.min(), xs.max() + 1
    out_rgb, out_mask, out_depth = fit_object_crop(
        rgb[:, y0:y1, x0:x1], mask[:, y0:y1, x0:x1], depth[:, y0:y1, x0:x1], size)
    return ViewSample(out_rgb, out_depth, out_mask, cam, inst)


# ---------------------------------------------------------------------------
# pose grids


def angle_grid(pitch_range=(0.0, 30.0), pitch_step=10.0, yaw_range=(-360.0, 360.0),
               yaw_step=12.0, distance=DEFAULT_DISTANCE, fov=DEFAULT_FOV):
    """Inclusive pitch x yaw grid; yaw values deduplicated modulo 360."""
    if pitch_step <= 0 or yaw_step <= 0:
        raise InvalidCameraError("grid steps must be positive")
    pitches = np.arange(pitch_range[0], pitch_range[1] + 1e-9, pitch_step)
    yaws_raw = np.arange(yaw_range[0], yaw_range[1] + 1e-9, yaw_step)
    seen = set()
    yaws = []
    for y in yaws_raw:
        key = round(float(y) % 360.0, 6)
        if key not in seen:
            seen.add(key)
            yaws.append(key)
    yaws.sort()
    return [CameraPose(float(p), float(y), distance, fov) for p in pitches for y in yaws]


def evaluation_grid(distance=DEFAULT_DISTANCE, fov=DEFAULT_FOV):
    """Dense grid: pitch 0..30 step 3, yaw full circle step 6."""
    return angle_grid((0.0, 30.0), 3.0, (0.0, 360.0), 6.0, distance, fov)


# ---------------------------------------------------------------------------
# dataset generation and manifest


@dataclass
class ManifestRecord:
    class_id: str
    instance_seed: int
    pitch: float
    yaw: float
    rgb_path: str
    depth_path: str
    mask_path: str


@dataclass
class DatasetManifest:
    size: int
    distance: float
    fov: float
    grid_spec: str
    format_version: int = MANIFEST_VERSION
    root: str = "."
    records: list = field(default_factory=list)

    def classes(self):
        seen = []
        for r in self.records:
            if r.class_id not in seen:
                seen.append(r.class_id)
        return seen

    def instances(self, class_id):
        seen = []
        for r in self.records:
            if r.class_id == class_id and r.instance_seed not in seen:
                seen.append(r.instance_seed)
        return seen

    def views(self, class_id, instance_seed):
        return [r for r in self.records
                if r.class_id == class_id and r.instance_seed == instance_seed]

    def load_view(self, record):
        """Decode one record to float arrays (rgb, depth, mask)."""
        rgb = read_rgb_png(os.path.join(self.root, record.rgb_path))
        depth = read_depth_png(os.path.join(self.root, record.depth_path))
        mask = read_mask_png(os.path.join(self.root, record.mask_path))
        return rgb, depth, mask

    def dumps(self):
        out = io.StringIO()
        out.write(f"format_version={self.format_version}\n")
        out.write(f"size={self.size}\n")
        out.write(f"distance={self.distance}\n")
        out.write(f"fov={self.fov}\n")
        out.write(f"grid={self.grid_spec}\n")
        out.write("note=yaw values deduplicated modulo 360\n")
        out.write("\n")
        w = csv.writer(out)
        w.writerow(["class", "instance_seed", "pitch", "yaw", "rgb", "depth", "mask"])
        for r in self.records:
            w.writerow([r.class_id, r.instance_seed, r.pitch, r.yaw,
                        r.rgb_path, r.depth_path, r.mask_path])
        return out.getvalue()

    def save(self, path):
        with open(path, "w", newline="") as f:
            f.write(self.dumps())
        self.root = os.path.dirname(os.path.abspath(path))

    @classmethod
    def load(cls, path):
        root = os.path.dirname(os.path.abspath(path))
        with open(path) as f:
            text = f.read()
        try:
            head_text, body = text.split("\n\n", 1)
        except ValueError as exc:
            raise DatasetError(f"malformed manifest {path!r}: no header separator") from exc
        head = {}
        for line in head_text.splitlines():
            k, _, v = line.partition("=")
            head[k] = v
        try:
            man = cls(size=int(head["size"]), distance=float(head["distance"]),
                      fov=float(head["fov"]), grid_spec=head["grid"],
                      format_version=int(head["format_version"]), root=root)
        except KeyError as exc:
            raise DatasetError(f"manifest {path!r} missing header key {exc}") from exc
        rows = list(csv.reader(io.StringIO(body)))
        for row in rows[1:]:
            if not row:
                continue
            man.records.append(ManifestRecord(row[0], int(row[1]), float(row[2]),
                                              float(row[3]), row[4], row[5], row[6]))
        return man


def generate_dataset(classes, instances_per_class, grid, size, root, overwrite=False):
    """Render every (class, instance, pose) and write images plus manifest.

    Deterministic: a re-run with the same arguments reproduces identical
    image bytes and manifest text.
    """
    manifest_path = os.path.join(root, MANIFEST_NAME)
    if os.path.exists(manifest_path) and not overwrite:
        raise DatasetError(f"{manifest_path} already exists; pass overwrite to regenerate")
    os.makedirs(root, exist_ok=True)

    if not grid:
        raise DatasetError("empty pose grid")
    d0 = grid[0]
    grid_spec = (f"pitch:{min(p.pitch for p in grid)}:{max(p.pitch for p in grid)},"
                 f"yaw:{min(p.yaw for p in grid)}:{max(p.yaw for p in grid)},poses:{len(grid)}")
    man = DatasetManifest(size=size, distance=d0.distance, fov=d0.fov,
                          grid_spec=grid_spec, root=root)
    for class_id in classes:
        for seed in range(instances_per_class):
            inst = make_instance(class_id, seed)
            inst_dir = os.path.join(class_id, f"inst{seed:03d}")
            os.makedirs(os.path.join(root, inst_dir), exist_ok=True)
            for cam in grid:
                sample = rasterize(inst, cam, size)
                stem = f"p{cam.pitch:+07.2f}_y{cam.yaw:+07.2f}"
                paths = {kind: os.path.join(inst_dir, f"{stem}_{kind}.png")
                         for kind in ("rgb", "depth", "mask")}
                write_rgb_png(os.path.join(root, paths["rgb"]), sample.rgb)
                write_depth_png(os.path.join(root, paths["depth"]), sample.depth)
                write_mask_png(os.path.join(root, paths["mask"]), sample.mask)
                man.records.append(ManifestRecord(class_id, seed, cam.pitch, cam.yaw,
                                                  paths["rgb"], paths["depth"], paths["mask"]))
    man.save(manifest_path)
    return man
