"""Procedural desk-scale scenes with exact geometry and ground truth.

Scenes are collections of non-intersecting convex primitives (axis-aligned
boxes, spheres, upright capped cylinders) observed from a circular camera
orbit.  Depth and 2D masks come from analytic ray casting, so every depth
pixel lies on a primitive surface up to millimeter quantization, and the
scene cloud is sampled directly from the same surfaces with per-point
instance labels.  That gives the pipeline a fully trusted end-to-end
oracle.

Sensor imperfections are opt-in knobs: depth dropout zeroes a fixed
surface patch on "reflective" objects (mimicking glass, which fails in
every view, not at random), pose jitter perturbs the written poses while
rendering stays at the true pose, and mask erosion shrinks each 2D mask.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError
from .features import FeatureRecord, instance_record
from .geometry import CameraIntrinsics, Pose, pixel_grid
from .sceneio import (
    write_color_png,
    write_depth_png,
    write_intrinsics,
    write_mask_png,
    write_ply,
    write_pose,
)
from .geometry import DepthImage

NEAR_CLIP = 0.05


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    room_size: tuple[float, float, float] = (3.0, 3.0, 2.0)
    object_count: tuple[int, int] = (8, 12)
    primitive_types: tuple[str, ...] = ("box", "sphere", "cylinder")
    object_extent: tuple[float, float] = (0.12, 0.3)  # half-size / radius range, m
    placement_radius: float = 1.1  # objects stay inside this disc
    placement_margin: float = 0.18  # min gap between object bounding boxes
    reflective_probability: float = 0.0
    depth_dropout: float = 0.0  # fraction of a reflective object's pixels zeroed
    orbit_radius: float = 2.2
    orbit_height: float = 1.6
    frame_count: int = 60
    image_width: int = 320
    image_height: int = 240
    hfov_deg: float = 60.0
    pose_jitter_deg: float = 0.0
    pose_jitter_m: float = 0.0
    mask_erosion_px: int = 0
    cloud_points_per_m2: float = 12000.0

    def __post_init__(self):
        if self.object_count[0] < 1 or self.object_count[1] < self.object_count[0]:
            raise DataError(f"bad object count range {self.object_count}")
        if not (0 <= self.depth_dropout <= 1):
            raise DataError(f"depth dropout must be in [0, 1], got {self.depth_dropout}")
        if self.frame_count < 1:
            raise DataError("frame_count must be >= 1")
        unknown = set(self.primitive_types) - {"box", "sphere", "cylinder"}
        if unknown:
            raise DataError(f"unknown primitive types {sorted(unknown)}")

    @property
    def intrinsics(self) -> CameraIntrinsics:
        fx = (self.image_width / 2.0) / np.tan(np.deg2rad(self.hfov_deg) / 2.0)
        return CameraIntrinsics(
            fx=fx,
            fy=fx,
            cx=(self.image_width - 1) / 2.0,
            cy=(self.image_height - 1) / 2.0,
            width=self.image_width,
            height=self.image_height,
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        obj = json.loads(text)
        for key in ("room_size", "object_count", "primitive_types", "object_extent"):
            if key in obj:
                obj[key] = tuple(obj[key])
        return cls(**obj)


# ---------------------------------------------------------------------------
# primitives


@dataclass
class Box:
    center: np.ndarray
    half: np.ndarray  # half-extents per axis

    def raycast(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        lo = self.center - self.half
        hi = self.center + self.half
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - origin) / dirs
            t2 = (hi - origin) / dirs
        tmin = np.nanmax(np.minimum(t1, t2), axis=1)
        tmax = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = (tmax >= tmin) & (tmin > NEAR_CLIP)
        return np.where(hit, tmin, np.inf)

    def sample_surface(self, rng, n: int) -> np.ndarray:
        hx, hy, hz = self.half
        areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy]) * 4.0
        face = rng.choice(6, size=n, p=areas / areas.sum())
        a = rng.uniform(-1, 1, size=n)
        b = rng.uniform(-1, 1, size=n)
        pts = np.zeros((n, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, -1.0, 1.0)
        others = np.array([[1, 2], [0, 2], [0, 1]])
        for ax in range(3):
            sel = axis == ax
            o1, o2 = others[ax]
            pts[sel, ax] = sign[sel] * self.half[ax]
            pts[sel, o1] = a[sel] * self.half[o1]
            pts[sel, o2] = b[sel] * self.half[o2]
        return pts + self.center

    def surface_area(self) -> float:
        hx, hy, hz = self.half
        return 8.0 * (hx * hy + hy * hz + hx * hz)

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        q = np.abs(points - self.center) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = np.minimum(q.max(axis=1), 0.0)
        return np.abs(outside + inside)

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        return self.center - self.half, self.center + self.half


@dataclass
class Sphere:
    center: np.ndarray
    radius: float

    def raycast(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        oc = origin - self.center
        a = np.einsum("ij,ij->i", dirs, dirs)
        b = dirs @ oc
        c = oc @ oc - self.radius**2
        disc = b * b - a * c
        ok = disc >= 0
        t = np.full(len(dirs), np.inf)
        sqrt_disc = np.sqrt(np.where(ok, disc, 0.0))
        near_root = (-b - sqrt_disc) / a
        far_root = (-b + sqrt_disc) / a
        t_hit = np.where(near_root > NEAR_CLIP, near_root, far_root)
        valid = ok & (t_hit > NEAR_CLIP)
        t[valid] = t_hit[valid]
        return t

    def sample_surface(self, rng, n: int) -> np.ndarray:
        v = rng.normal(size=(n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return self.center + self.radius * v

    def surface_area(self) -> float:
        return 4.0 * np.pi * self.radius**2

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        return np.abs(np.linalg.norm(points - self.center, axis=1) - self.radius)

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        r = np.full(3, self.radius)
        return self.center - r, self.center + r


@dataclass
class Cylinder:
    center: np.ndarray  # mid-height axis point
    radius: float
    half_height: float

    def raycast(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        ox, oy, oz = origin - self.center
        dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        best = np.full(len(dirs), np.inf)
        # lateral surface
        a = dx * dx + dy * dy
        b = ox * dx + oy * dy
        c = ox * ox + oy * oy - self.radius**2
        with np.errstate(divide="ignore", invalid="ignore"):
            disc = b * b - a * c
            sqrt_disc = np.sqrt(np.where(disc >= 0, disc, 0.0))
            for root in ((-b - sqrt_disc) / a, (-b + sqrt_disc) / a):
                z = oz + root * dz
                valid = (disc >= 0) & (a > 0) & (root > NEAR_CLIP) & (np.abs(z) <= self.half_height)
                best = np.where(valid & (root < best), root, best)
            # caps
            for cap_z in (-self.half_height, self.half_height):
                t = (cap_z - oz) / dz
                px = ox + t * dx
                py = oy + t * dy
                valid = (t > NEAR_CLIP) & (px * px + py * py <= self.radius**2)
                best = np.where(valid & (t < best), t, best)
        return best

    def sample_surface(self, rng, n: int) -> np.ndarray:
        side = 2 * np.pi * self.radius * 2 * self.half_height
        cap = np.pi * self.radius**2
        which = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
        theta = rng.uniform(0, 2 * np.pi, size=n)
        pts = np.zeros((n, 3))
        on_side = which == 0
        pts[on_side, 0] = self.radius * np.cos(theta[on_side])
        pts[on_side, 1] = self.radius * np.sin(theta[on_side])
        pts[on_side, 2] = rng.uniform(-self.half_height, self.half_height, size=on_side.sum())
        for cap_idx, cap_z in ((1, -self.half_height), (2, self.half_height)):
            sel = which == cap_idx
            rad = self.radius * np.sqrt(rng.uniform(0, 1, size=sel.sum()))
            pts[sel, 0] = rad * np.cos(theta[sel])
            pts[sel, 1] = rad * np.sin(theta[sel])
            pts[sel, 2] = cap_z
        return pts + self.center

    def surface_area(self) -> float:
        return 2 * np.pi * self.radius * (2 * self.half_height + self.radius)

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        rel = points - self.center
        radial = np.hypot(rel[:, 0], rel[:, 1]) - self.radius
        axial = np.abs(rel[:, 2]) - self.half_height
        outside = np.hypot(np.maximum(radial, 0), np.maximum(axial, 0))
        inside = np.minimum(np.maximum(radial, axial), 0)
        return np.abs(outside + inside)

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        ext = np.array([self.radius, self.radius, self.half_height])
        return self.center - ext, self.center + ext


@dataclass
class SceneObject:
    object_id: int  # 1-based; doubles as GT instance id and 2D mask id
    primitive: Box | Sphere | Cylinder
    kind: str
    color: np.ndarray
    reflective: bool
    dropout_anchor: np.ndarray | None = None


@dataclass
class Scene:
    spec: SceneSpec
    objects: list[SceneObject]
    poses: list[Pose]  # true rendering poses
    written_poses: list[Pose]  # poses emitted to disk (jitter applied)
    cloud_points: np.ndarray = field(default=None, repr=False)
    cloud_ids: np.ndarray = field(default=None, repr=False)
    cloud_colors: np.ndarray = field(default=None, repr=False)


def _make_primitive(kind: str, center, extent, rng) -> Box | Sphere | Cylinder:
    if kind == "box":
        half = np.array([extent, extent, extent]) * rng.uniform(0.6, 1.0, size=3)
        center = np.array([center[0], center[1], half[2]])
        return Box(center=center, half=half)
    if kind == "sphere":
        return Sphere(center=np.array([center[0], center[1], extent]), radius=extent)
    half_height = extent * rng.uniform(0.8, 1.6)
    return Cylinder(
        center=np.array([center[0], center[1], half_height]),
        radius=extent * rng.uniform(0.5, 0.9),
        half_height=half_height,
    )


def _aabbs_clear(a, b, margin: float) -> bool:
    (alo, ahi), (blo, bhi) = a.aabb(), b.aabb()
    return bool(np.any(alo - margin >= bhi) or np.any(blo - margin >= ahi))


def _look_at(eye: np.ndarray, target: np.ndarray) -> Pose:
    forward = target - eye
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    mat = np.eye(4)
    mat[:3, 0] = right
    mat[:3, 1] = down
    mat[:3, 2] = forward
    mat[:3, 3] = eye
    return Pose(mat)


def _jitter_pose(pose: Pose, rot_deg: float, trans_m: float, rng) -> Pose:
    if rot_deg == 0 and trans_m == 0:
        return pose
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.deg2rad(rng.normal(scale=max(rot_deg, 1e-12)))
    k = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    rot = np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)
    mat = pose.matrix.copy()
    mat[:3, :3] = rot @ mat[:3, :3]
    mat[:3, 3] += rng.normal(scale=max(trans_m, 1e-12), size=3)
    # re-orthonormalize to keep the pose invariants exact
    u, _, vt = np.linalg.svd(mat[:3, :3])
    mat[:3, :3] = u @ vt
    return Pose(mat)


def build_scene(spec: SceneSpec) -> Scene:
    """Place objects and cameras; deterministic in the spec's seed."""
    rng = np.random.default_rng(spec.seed)
    n_objects = int(rng.integers(spec.object_count[0], spec.object_count[1] + 1))
    objects: list[SceneObject] = []
    attempts = 0
    while len(objects) < n_objects:
        attempts += 1
        if attempts > 20000:
            raise DataError("object placement failed; spec too crowded")
        kind = str(rng.choice(list(spec.primitive_types)))
        extent = float(rng.uniform(*spec.object_extent))
        radius = rng.uniform(0, spec.placement_radius - extent)
        angle = rng.uniform(0, 2 * np.pi)
        center_xy = (radius * np.cos(angle), radius * np.sin(angle))
        prim = _make_primitive(kind, center_xy, extent, rng)
        if all(_aabbs_clear(prim, other.primitive, spec.placement_margin) for other in objects):
            color = rng.integers(40, 256, size=3).astype(np.uint8)
            reflective = bool(rng.random() < spec.reflective_probability)
            anchor = prim.sample_surface(rng, 1)[0] if reflective else None
            objects.append(
                SceneObject(
                    object_id=len(objects) + 1,
                    primitive=prim,
                    kind=kind,
                    color=color,
                    reflective=reflective,
                    dropout_anchor=anchor,
                )
            )

    target = np.array([0.0, 0.0, float(np.mean([o.primitive.center[2] for o in objects]))])
    poses = []
    written = []
    for k in range(spec.frame_count):
        theta = 2 * np.pi * k / spec.frame_count
        eye = np.array(
            [spec.orbit_radius * np.cos(theta), spec.orbit_radius * np.sin(theta), spec.orbit_height]
        )
        pose = _look_at(eye, target)
        poses.append(pose)
        written.append(_jitter_pose(pose, spec.pose_jitter_deg, spec.pose_jitter_m, rng))

    # sample the scene cloud from object surfaces
    pts_parts = []
    ids_parts = []
    color_parts = []
    for obj in objects:
        n = max(200, int(obj.primitive.surface_area() * spec.cloud_points_per_m2))
        pts = obj.primitive.sample_surface(rng, n)
        pts_parts.append(pts)
        ids_parts.append(np.full(n, obj.object_id, dtype=np.int32))
        color_parts.append(np.tile(obj.color, (n, 1)))
    return Scene(
        spec=spec,
        objects=objects,
        poses=poses,
        written_poses=written,
        cloud_points=np.vstack(pts_parts),
        cloud_ids=np.concatenate(ids_parts),
        cloud_colors=np.vstack(color_parts).astype(np.uint8),
    )


def render_frame(scene: Scene, frame: int):
    """Ray-cast one frame; returns (depth_mm uint16, object_map uint16)."""
    spec = scene.spec
    intr = spec.intrinsics
    pose = scene.poses[frame]
    u, v = pixel_grid(intr)
    dirs_cam = np.column_stack(
        [
            (u.ravel() - intr.cx) / intr.fx,
            (v.ravel() - intr.cy) / intr.fy,
            np.ones(intr.pixel_count),
        ]
    )
    dirs_world = dirs_cam @ pose.rotation.T
    origin = pose.camera_center
    t_all = np.stack([o.primitive.raycast(origin, dirs_world) for o in scene.objects])
    nearest = np.argmin(t_all, axis=0)
    t_hit = t_all[nearest, np.arange(t_all.shape[1])]
    hit = np.isfinite(t_hit)
    # parameter along a z=1 camera ray equals camera-space depth
    depth_mm = np.zeros(intr.pixel_count, dtype=np.uint16)
    depth_mm[hit] = np.floor(t_hit[hit] * 1000.0 + 0.5).astype(np.uint16)
    object_map = np.zeros(intr.pixel_count, dtype=np.uint16)
    object_map[hit] = nearest[hit] + 1
    shape = (intr.height, intr.width)
    return depth_mm.reshape(shape), object_map.reshape(shape), dirs_world, t_hit


def apply_dropout(scene: Scene, frame: int, depth_mm, object_map, dirs_world, t_hit):
    """Zero each reflective object's fixed surface patch in the raw depth."""
    spec = scene.spec
    if spec.depth_dropout == 0:
        return depth_mm.copy()
    raw = depth_mm.copy().ravel()
    flat_map = object_map.ravel()
    origin = scene.poses[frame].camera_center
    for obj in scene.objects:
        if not obj.reflective:
            continue
        sel = np.flatnonzero(flat_map == obj.object_id)
        if len(sel) == 0:
            continue
        hits = origin + t_hit[sel, None] * dirs_world[sel]
        d2 = np.sum((hits - obj.dropout_anchor) ** 2, axis=1)
        n_drop = int(np.floor(spec.depth_dropout * len(sel) + 0.5))
        drop = sel[np.argsort(d2, kind="stable")[:n_drop]]
        raw[drop] = 0
    return raw.reshape(depth_mm.shape)


def erode_masks(object_map: np.ndarray, px: int) -> np.ndarray:
    if px <= 0:
        return object_map
    out = np.zeros_like(object_map)
    for oid in np.unique(object_map):
        if oid == 0:
            continue
        eroded = ndimage.binary_erosion(object_map == oid, iterations=px)
        out[eroded] = oid
    return out


def generate(spec: SceneSpec, out_dir) -> Path:
    """Write a complete scene directory; byte-deterministic in the seed."""
    out = Path(out_dir)
    scene = build_scene(spec)
    for sub in ("depth", "pose", "mask", "color"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    write_intrinsics(out / "intrinsics.txt", spec.intrinsics)
    write_ply(out / "cloud.ply", scene.cloud_points, colors=scene.cloud_colors)
    write_ply(
        out / "gt_instances.ply",
        scene.cloud_points,
        int_props={"instance_id": scene.cloud_ids},
    )
    (out / "spec.json").write_text(spec.to_json() + "\n")
    palette = {obj.object_id: obj.color for obj in scene.objects}
    for t in range(spec.frame_count):
        depth_mm, object_map, dirs_world, t_hit = render_frame(scene, t)
        raw = apply_dropout(scene, t, depth_mm, object_map, dirs_world, t_hit)
        masks = erode_masks(object_map, spec.mask_erosion_px)
        write_depth_png(out / "depth" / f"depth_{t:06d}.png", DepthImage(raw))
        write_mask_png(out / "mask" / f"mask_{t:06d}.png", masks)
        write_pose(out / "pose" / f"pose_{t:06d}.txt", scene.written_poses[t])
        rgb = np.zeros((spec.image_height, spec.image_width, 3), dtype=np.uint8)
        for oid, color in palette.items():
            rgb[object_map == oid] = color
        write_color_png(out / "color" / f"color_{t:06d}.png", rgb)
    return out


def synth_features(
    instance_ids: list[int],
    class_of: dict[int, int],
    dim: int,
    noise_sigma: float = 0.0,
    seed: int = 0,
) -> list[FeatureRecord]:
    """One-hot class vectors (plus optional isotropic noise) per instance.

    Stands in for a learned image embedder in tests: instances of the same
    class share a basis direction, so cosine queries against class one-hots
    have a known right answer.
    """
    n_classes = max(class_of.values()) + 1
    if dim < n_classes:
        raise DataError(f"feature dim {dim} smaller than class count {n_classes}")
    rng = np.random.default_rng(seed)
    records = []
    for iid in instance_ids:
        vec = np.zeros(dim)
        vec[class_of[iid]] = 1.0
        if noise_sigma > 0:
            vec = vec + rng.normal(scale=noise_sigma, size=dim)
        vec /= np.linalg.norm(vec)
        records.append(instance_record(iid, vec))
    return records
