"""Point clouds, pinhole cameras and the camera ring used to render views.

Conventions
-----------
World frame is y-up. Camera frame follows the usual computer-vision layout:
x to the right, y down, z forward (depth). A camera maps a world point ``p``
to ``R @ p + t``; pixel ``(row, col)`` covers ``u in [col, col + 1)`` and
``v in [row, row + 1)``, so pixel centres sit at half-integers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DEPTH_EPS = 1e-12


class DegenerateDepth(ValueError):
    """Raised when a point lies on the camera-centre plane."""


class InvalidCamera(ValueError):
    pass


def as_points(points) -> np.ndarray:
    """Return ``points`` as a finite float64 array of shape (N, 3)."""
    if isinstance(points, PointCloud):
        return points.points
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.shape[0] == 3:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("point coordinates must be finite")
    return arr


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An ordered, immutable set of 3D points in object coordinates."""

    points: np.ndarray

    def __post_init__(self):
        arr = np.array(as_points(self.points), dtype=np.float64, copy=True)
        if arr.shape[0] < 1:
            raise ValueError("a point cloud needs at least one point")
        arr.setflags(write=False)
        object.__setattr__(self, "points", arr)

    def __len__(self):
        return self.points.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.points if dtype is None else self.points.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        return np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash(self.points.tobytes())

    def to_ply(self, path, binary: bool = False) -> None:
        write_ply(path, self.points, binary=binary)

    @classmethod
    def from_ply(cls, path) -> "PointCloud":
        return cls(read_ply(path))


def _check_rotation(rot: np.ndarray) -> None:
    if rot.shape != (3, 3) or not np.all(np.isfinite(rot)):
        raise InvalidCamera("rotation must be a finite 3x3 matrix")
    if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-9, rtol=0.0):
        raise InvalidCamera("rotation is not orthonormal")
    if np.linalg.det(rot) < 0:
        raise InvalidCamera("rotation has determinant -1")


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera with world-to-camera extrinsics ``(rotation, translation)``."""

    rotation: np.ndarray
    translation: np.ndarray
    fx: float = 64.0
    fy: float = 64.0
    cx: float = 32.0
    cy: float = 32.0
    width: int = 64
    height: int = 64

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64, copy=True).reshape(3, 3)
        trans = np.array(self.translation, dtype=np.float64, copy=True).reshape(3)
        _check_rotation(rot)
        if not np.all(np.isfinite(trans)):
            raise InvalidCamera("translation must be finite")
        if int(self.width) < 1 or int(self.height) < 1:
            raise InvalidCamera("resolution must be at least 1x1")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))

    def __eq__(self, other):
        if not isinstance(other, Camera):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation)
                and self.intrinsics == other.intrinsics)

    __hash__ = None

    @property
    def intrinsics(self) -> tuple:
        return (self.fx, self.fy, self.cx, self.cy, self.width, self.height)

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0), **intrinsics) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        norm = np.linalg.norm(right)
        if norm < 1e-9:
            raise InvalidCamera("viewing direction is parallel to the up vector")
        right /= norm
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        return cls(rot, -rot @ eye, **intrinsics)

    def scaled(self, factor: float) -> "Camera":
        """Same pose, with the image plane resampled by ``factor``."""
        return Camera(self.rotation, self.translation,
                      self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
                      max(1, int(round(self.width * factor))),
                      max(1, int(round(self.height * factor))))

    def to_text(self) -> str:
        fmt = lambda values: " ".join(repr(float(v)) for v in values)
        lines = [
            f"rotation = {fmt(self.rotation.ravel())}",
            f"translation = {fmt(self.translation)}",
            f"fx = {self.fx!r}",
            f"fy = {self.fy!r}",
            f"cx = {self.cx!r}",
            f"cy = {self.cy!r}",
            f"width = {self.width}",
            f"height = {self.height}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Camera":
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            values[key] = val
        try:
            return cls(
                np.array(values["rotation"].split(), dtype=np.float64).reshape(3, 3),
                np.array(values["translation"].split(), dtype=np.float64),
                float(values["fx"]), float(values["fy"]),
                float(values["cx"]), float(values["cy"]),
                int(values["width"]), int(values["height"]),
            )
        except KeyError as exc:
            raise ValueError(f"camera block is missing key {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "Camera":
        return cls.from_text(Path(path).read_text())


def transform_to_camera(points, cam: Camera) -> np.ndarray:
    """Map world points into the camera frame, ``R p + t`` row-wise."""
    pts = as_points(points)
    return pts @ cam.rotation.T + cam.translation


def project(p, cam: Camera):
    """Project a single world point. Returns ``(u, v, depth)``."""
    x, y, z = transform_to_camera(p, cam)[0]
    if abs(z) < DEPTH_EPS:
        raise DegenerateDepth(f"camera-space depth {z!r} is on the centre plane")
    return cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy, z


def project_points(points, cam: Camera):
    """Vectorised projection; rows with ``|z| < 1e-12`` come back as NaN."""
    pc = transform_to_camera(points, cam)
    z = pc[:, 2]
    ok = np.abs(z) >= DEPTH_EPS
    safe = np.where(ok, z, 1.0)
    u = np.where(ok, cam.fx * pc[:, 0] / safe + cam.cx, np.nan)
    v = np.where(ok, cam.fy * pc[:, 1] / safe + cam.cy, np.nan)
    return u, v, z


@dataclass(frozen=True)
class ViewRing:
    """Cameras spread evenly in azimuth around the object, elevation jittered.

    ``random_phase`` rotates the whole ring by a random azimuth so views are
    not aligned with the object axes.
    """

    view_count: int = 8
    longitudinal_range: tuple = (-20.0, 40.0)
    radius: float = 2.5
    seed: int = 0
    random_phase: bool = False
    fx: float = 64.0
    fy: float = 64.0
    cx: float = 32.0
    cy: float = 32.0
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if self.view_count < 1:
            raise ValueError("view_count must be >= 1")
        lo, hi = self.longitudinal_range
        if lo > hi:
            raise ValueError("longitudinal_range must satisfy min <= max")
        if not -90.0 < lo <= hi < 90.0:
            raise ValueError("elevations must stay strictly inside (-90, 90) degrees")
        if self.radius <= 0:
            raise ValueError("radius must be positive")

    @property
    def intrinsics(self) -> dict:
        return dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy,
                    width=self.width, height=self.height)


def camera_at(azimuth_deg: float, elevation_deg: float, radius: float, **intrinsics) -> Camera:
    """Camera on a sphere around the origin, looking at the origin.

    Azimuth 0 sits on the +z axis; positive elevation lifts the camera
    towards +y.
    """
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    eye = radius * np.array([math.cos(el) * math.sin(az), math.sin(el), math.cos(el) * math.cos(az)])
    return Camera.look_at(eye, **intrinsics)


def sample_view_ring(ring: ViewRing, rng: np.random.Generator | None = None):
    """Return ``ring.view_count`` cameras; azimuths are evenly spaced."""
    if rng is None:
        rng = np.random.default_rng(ring.seed)
    lo, hi = ring.longitudinal_range
    phase = rng.uniform(0.0, 360.0) if ring.random_phase else 0.0
    step = 360.0 / ring.view_count
    cams = []
    for k in range(ring.view_count):
        elevation = lo if lo == hi else rng.uniform(lo, hi)
        cams.append(camera_at(phase + k * step, elevation, ring.radius, **ring.intrinsics))
    return cams


# -- PLY -----------------------------------------------------------------------

def write_ply(path, points, binary: bool = False) -> None:
    pts = as_points(points)
    header = ["ply",
              "format binary_little_endian 1.0" if binary else "format ascii 1.0",
              f"element vertex {len(pts)}",
              "property double x", "property double y", "property double z",
              "end_header"]
    head = ("\n".join(header) + "\n").encode("ascii")
    if binary:
        body = pts.astype("<f8").tobytes()
    else:
        body = "".join(f"{x!r} {y!r} {z!r}\n" for x, y, z in pts.tolist()).encode("ascii")
    Path(path).write_bytes(head + body)


def read_ply(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii").splitlines()
    body = raw[end + len(b"end_header\n"):]
    count, props, fmt = None, [], None
    for line in header:
        parts = line.split()
        if parts[:1] == ["format"]:
            fmt = parts[1]
        elif parts[:2] == ["element", "vertex"]:
            count = int(parts[2])
        elif parts[:1] == ["property"] and count is not None:
            props.append((parts[1], parts[2]))
    if count is None or [p[1] for p in props[:3]] != ["x", "y", "z"]:
        raise ValueError(f"{path}: expected a vertex element with x y z")
    if fmt == "ascii":
        rows = body.decode("ascii").split()
        data = np.array(rows, dtype=np.float64).reshape(count, len(props))
    elif fmt == "binary_little_endian":
        if any(kind != "double" for kind, _ in props):
            raise ValueError(f"{path}: only double properties are supported in binary PLY")
        data = np.frombuffer(body, dtype="<f8", count=count * len(props)).reshape(count, len(props))
    else:
        raise ValueError(f"{path}: unsupported PLY format {fmt!r}")
    return np.ascontiguousarray(data[:, :3], dtype=np.float64)
