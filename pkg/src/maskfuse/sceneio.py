"""On-disk formats: binary PLY, 16-bit PNGs, pose/intrinsics text, scene layout.

A scene directory looks like::

    scene/
      intrinsics.txt            # "fx fy cx cy width height"
      cloud.ply                 # binary little-endian, float32 xyz (+ uint8 rgb)
      depth/depth_{t:06}.png    # 16-bit grayscale, millimeters, 0 = missing
      pose/pose_{t:06}.txt      # 16 floats, row-major camera-to-world
      mask/mask_{t:06}.png      # 16-bit labels, 0 = background
      color/color_{t:06}.png    # optional 8-bit RGB
      gt_instances.ply          # optional, xyz + int32 instance_id
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .geometry import CameraIntrinsics, DepthImage, Pose

_PLY_DTYPES = {
    "float": "<f4",
    "float32": "<f4",
    "double": "<f8",
    "float64": "<f8",
    "uchar": "u1",
    "uint8": "u1",
    "char": "i1",
    "int8": "i1",
    "short": "<i2",
    "int16": "<i2",
    "ushort": "<u2",
    "uint16": "<u2",
    "int": "<i4",
    "int32": "<i4",
    "uint": "<u4",
    "uint32": "<u4",
}


def write_ply(
    path,
    points: np.ndarray,
    colors: np.ndarray | None = None,
    int_props: dict[str, np.ndarray] | None = None,
) -> None:
    """Write a binary little-endian PLY with xyz float32 vertices.

    ``colors`` adds uint8 red/green/blue; ``int_props`` adds one int32
    scalar property per entry (e.g. ``{"instance_id": ids}``).
    """
    points = np.asarray(points)
    n = len(points)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    header = [
        "ply",
        "format binary_little_endian 1.0",
        f"element vertex {n}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if colors is not None:
        if len(colors) != n:
            raise DataError("color count does not match point count")
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    for name, arr in (int_props or {}).items():
        if len(arr) != n:
            raise DataError(f"property {name!r} count does not match point count")
        fields.append((name, "<i4"))
        header.append(f"property int {name}")
    header.append("end_header")

    data = np.empty(n, dtype=fields)
    data["x"] = points[:, 0].astype(np.float32)
    data["y"] = points[:, 1].astype(np.float32)
    data["z"] = points[:, 2].astype(np.float32)
    if colors is not None:
        colors = np.asarray(colors, dtype=np.uint8)
        data["red"], data["green"], data["blue"] = colors[:, 0], colors[:, 1], colors[:, 2]
    for name, arr in (int_props or {}).items():
        data[name] = np.asarray(arr, dtype=np.int32)

    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.tobytes())


def read_ply(path) -> dict[str, np.ndarray]:
    """Read a binary little-endian PLY vertex element.

    Returns a dict with ``points`` (N, 3) float64, ``colors`` (N, 3) uint8
    when red/green/blue are present, and any other scalar property under
    its own name.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"ply":
            raise DataError(f"{path}: not a PLY file")
        fmt = fh.readline().strip()
        if fmt != b"format binary_little_endian 1.0":
            raise DataError(f"{path}: unsupported PLY format {fmt.decode(errors='replace')!r}")
        n = None
        fields: list[tuple[str, str]] = []
        in_vertex = False
        while True:
            line = fh.readline()
            if not line:
                raise DataError(f"{path}: truncated PLY header")
            parts = line.strip().decode("ascii").split()
            if not parts or parts[0] == "comment":
                continue
            if parts[0] == "element":
                if parts[1] == "vertex":
                    n = int(parts[2])
                    in_vertex = True
                else:
                    if in_vertex and parts[1] != "vertex":
                        in_vertex = False
                    if int(parts[2]) > 0:
                        raise DataError(f"{path}: unsupported PLY element {parts[1]!r}")
            elif parts[0] == "property" and in_vertex:
                if parts[1] == "list":
                    raise DataError(f"{path}: list properties are not supported")
                if parts[1] not in _PLY_DTYPES:
                    raise DataError(f"{path}: unsupported property type {parts[1]!r}")
                fields.append((parts[2], _PLY_DTYPES[parts[1]]))
            elif parts[0] == "end_header":
                break
        if n is None:
            raise DataError(f"{path}: no vertex element")
        data = np.frombuffer(fh.read(), dtype=np.dtype(fields), count=n)

    names = {name for name, _ in fields}
    if not {"x", "y", "z"} <= names:
        raise DataError(f"{path}: vertex element lacks x/y/z")
    out: dict[str, np.ndarray] = {
        "points": np.column_stack(
            [data["x"].astype(np.float64), data["y"].astype(np.float64), data["z"].astype(np.float64)]
        )
    }
    if {"red", "green", "blue"} <= names:
        out["colors"] = np.column_stack([data["red"], data["green"], data["blue"]]).astype(np.uint8)
    for name, _ in fields:
        if name not in {"x", "y", "z", "red", "green", "blue"}:
            out[name] = np.asarray(data[name])
    return out


def write_depth_png(path, depth: DepthImage) -> None:
    Image.fromarray(depth.values.astype(np.uint16)).save(path)


def read_depth_png(path, scale: float = 1000.0) -> DepthImage:
    try:
        arr = np.asarray(Image.open(path))
    except FileNotFoundError:
        raise DataError(f"missing depth image {path}") from None
    if arr.ndim != 2:
        raise DataError(f"{path}: expected single-channel depth PNG")
    return DepthImage(arr.astype(np.uint16), scale=scale)


def write_mask_png(path, labels: np.ndarray) -> None:
    Image.fromarray(labels.astype(np.uint16)).save(path)


def read_mask_png(path) -> np.ndarray:
    try:
        arr = np.asarray(Image.open(path))
    except FileNotFoundError:
        raise DataError(f"missing mask image {path}") from None
    if arr.ndim != 2:
        raise DataError(f"{path}: expected single-channel mask PNG")
    return arr.astype(np.uint16)


def write_color_png(path, rgb: np.ndarray) -> None:
    Image.fromarray(rgb.astype(np.uint8), mode="RGB").save(path)


def write_intrinsics(path, intrinsics: CameraIntrinsics) -> None:
    with open(path, "w") as fh:
        fh.write(
            f"{intrinsics.fx:.17g} {intrinsics.fy:.17g} {intrinsics.cx:.17g} "
            f"{intrinsics.cy:.17g} {intrinsics.width} {intrinsics.height}\n"
        )


def read_intrinsics(path) -> CameraIntrinsics:
    try:
        text = Path(path).read_text()
    except FileNotFoundError:
        raise DataError(f"missing intrinsics file {path}") from None
    parts = text.split()
    if len(parts) != 6:
        raise DataError(f"{path}: expected 'fx fy cx cy width height', got {len(parts)} fields")
    fx, fy, cx, cy = (float(p) for p in parts[:4])
    return CameraIntrinsics(fx=fx, fy=fy, cx=cx, cy=cy, width=int(parts[4]), height=int(parts[5]))


def write_pose(path, pose: Pose) -> None:
    with open(path, "w") as fh:
        for row in pose.matrix:
            fh.write(" ".join(f"{x:.17g}" for x in row) + "\n")


def read_pose(path) -> Pose:
    try:
        values = [float(x) for x in Path(path).read_text().split()]
    except FileNotFoundError:
        raise DataError(f"missing pose file {path}") from None
    if len(values) != 16:
        raise DataError(f"{path}: expected 16 floats, got {len(values)}")
    return Pose(np.array(values).reshape(4, 4))


_FRAME_RE = re.compile(r"depth_(\d{6})\.png$")


@dataclass
class SceneDirectory:
    """Lazy accessor over the on-disk scene layout."""

    root: Path
    intrinsics: CameraIntrinsics
    frame_ids: list[int]

    @classmethod
    def open(cls, root) -> "SceneDirectory":
        root = Path(root)
        if not root.is_dir():
            raise DataError(f"scene directory {root} does not exist")
        intrinsics = read_intrinsics(root / "intrinsics.txt")
        depth_dir = root / "depth"
        if not depth_dir.is_dir():
            raise DataError(f"missing depth directory {depth_dir}")
        frame_ids = sorted(
            int(m.group(1)) for p in depth_dir.iterdir() if (m := _FRAME_RE.search(p.name))
        )
        if not frame_ids:
            raise DataError(f"{depth_dir}: no depth frames found")
        scene = cls(root=root, intrinsics=intrinsics, frame_ids=frame_ids)
        for t in frame_ids:
            for path in (scene.pose_path(t), scene.mask_path(t)):
                if not path.exists():
                    raise DataError(f"frame {t:06d} incomplete: missing {path}")
        if not scene.cloud_path.exists():
            raise DataError(f"missing point cloud {scene.cloud_path}")
        return scene

    @property
    def cloud_path(self) -> Path:
        return self.root / "cloud.ply"

    def depth_path(self, t: int) -> Path:
        return self.root / "depth" / f"depth_{t:06d}.png"

    def pose_path(self, t: int) -> Path:
        return self.root / "pose" / f"pose_{t:06d}.txt"

    def mask_path(self, t: int) -> Path:
        return self.root / "mask" / f"mask_{t:06d}.png"

    def color_path(self, t: int) -> Path:
        return self.root / "color" / f"color_{t:06d}.png"

    def load_cloud(self) -> dict[str, np.ndarray]:
        return read_ply(self.cloud_path)

    def load_depth(self, t: int) -> DepthImage:
        depth = read_depth_png(self.depth_path(t))
        if (depth.height, depth.width) != (self.intrinsics.height, self.intrinsics.width):
            raise DataError(
                f"{self.depth_path(t)}: {depth.width}x{depth.height} does not match "
                f"intrinsics {self.intrinsics.width}x{self.intrinsics.height}"
            )
        return depth

    def load_pose(self, t: int) -> Pose:
        return read_pose(self.pose_path(t))

    def load_mask(self, t: int) -> np.ndarray:
        mask = read_mask_png(self.mask_path(t))
        if mask.shape != (self.intrinsics.height, self.intrinsics.width):
            raise DataError(f"{self.mask_path(t)}: mask dimensions do not match intrinsics")
        return mask
