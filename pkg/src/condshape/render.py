"""Z-buffered point splatting, view-based sampling and depth-map unprojection.

Each point lands on exactly one pixel (``col = floor(u)``, ``row = floor(v)``).
The nearest point wins its pixel; equal depths resolve to the lower point
index. Sampled indices are constants of the forward pass: gradients reach the
selected points only through whatever loss is computed on them afterwards.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geom import DEPTH_EPS, Camera, as_points

EMPTY = 0.0
NONE = -1


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Camera-space depth per pixel; ``EMPTY`` (0) where nothing was splatted."""

    depth: np.ndarray
    contributor: np.ndarray

    @property
    def height(self):
        return self.depth.shape[0]

    @property
    def width(self):
        return self.depth.shape[1]

    @property
    def filled(self) -> np.ndarray:
        return self.contributor != NONE

    def __eq__(self, other):
        if not isinstance(other, DepthMap):
            return NotImplemented
        return (np.array_equal(self.depth, other.depth)
                and np.array_equal(self.contributor, other.contributor))

    __hash__ = None


@dataclass(frozen=True)
class ViewSampleResult:
    front_indices: np.ndarray
    back_indices: np.ndarray


def _splat(cam_points: np.ndarray, fx, fy, cx, cy, width, height):
    """Pixel id (or -1 when outside / behind) for camera-frame points ``(..., 3)``."""
    z = cam_points[..., 2]
    ok = z > DEPTH_EPS
    safe = np.where(ok, z, 1.0)
    u = fx * cam_points[..., 0] / safe + cx
    v = fy * cam_points[..., 1] / safe + cy
    with np.errstate(invalid="ignore"):
        col = np.floor(u)
        row = np.floor(v)
    ok &= (col >= 0) & (col < width) & (row >= 0) & (row < height)
    pix = np.where(ok, row * width + col, -1).astype(np.int64)
    return pix, z


def _winners(keys: np.ndarray, depth: np.ndarray):
    """Positions (into ``keys``) of the nearest entry per distinct non-negative key."""
    valid = np.flatnonzero(keys >= 0)
    if valid.size == 0:
        return valid
    order = valid[np.lexsort((valid, depth[valid], keys[valid]))]
    sorted_keys = keys[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = sorted_keys[1:] != sorted_keys[:-1]
    return order[first]


def render_depth(points, cam: Camera) -> DepthMap:
    """Z-buffer ``points`` into a ``cam.height x cam.width`` depth map."""
    pts = np.zeros((0, 3)) if np.size(points) == 0 else as_points(points)
    cp = pts @ cam.rotation.T + cam.translation
    pix, z = _splat(cp, cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height)
    win = _winners(pix, z)
    depth = np.full(cam.width * cam.height, EMPTY)
    contrib = np.full(cam.width * cam.height, NONE, dtype=np.int64)
    depth[pix[win]] = z[win]
    contrib[pix[win]] = win
    shape = (cam.height, cam.width)
    return DepthMap(depth.reshape(shape), contrib.reshape(shape))


def view_based_sample(points, cam: Camera) -> ViewSampleResult:
    """Split point indices into the ones that win a pixel (front) and the rest."""
    dm = render_depth(points, cam)
    n = len(np.asarray(points))
    front = np.unique(dm.contributor[dm.filled])
    mask = np.zeros(n, dtype=bool)
    mask[front] = True
    return ViewSampleResult(front, np.flatnonzero(~mask))


def front_masks(points: np.ndarray, cams) -> np.ndarray:
    """Batched view-based sampling: ``points`` is ``(B, N, 3)``, one camera per item.

    Returns a boolean ``(B, N)`` mask of front points. Equivalent to calling
    :func:`view_based_sample` item by item.
    """
    points = np.asarray(points, dtype=np.float64)
    b, n, _ = points.shape
    rot = np.stack([c.rotation for c in cams])
    trans = np.stack([c.translation for c in cams])
    intr = np.array([[c.fx, c.fy, c.cx, c.cy, c.width, c.height] for c in cams])
    cp = np.einsum("bij,bnj->bni", rot, points) + trans[:, None, :]
    fx, fy, cx, cy, w, h = (intr[:, k][:, None] for k in range(6))
    pix, z = _splat(cp, fx, fy, cx, cy, w, h)
    offsets = np.concatenate([[0], np.cumsum(intr[:, 4] * intr[:, 5])[:-1]]).astype(np.int64)
    keys = np.where(pix >= 0, pix + offsets[:, None], -1).ravel()
    win = _winners(keys, z.ravel())
    mask = np.zeros(b * n, dtype=bool)
    mask[win] = True
    return mask.reshape(b, n)


def inverse_project(dm: DepthMap, cam: Camera) -> np.ndarray:
    """World-space point for every filled pixel, unprojected through the pixel centre."""
    rows, cols = np.nonzero(dm.filled)
    z = dm.depth[rows, cols]
    x = (cols + 0.5 - cam.cx) / cam.fx * z
    y = (rows + 0.5 - cam.cy) / cam.fy * z
    cam_pts = np.stack([x, y, z], axis=1)
    return (cam_pts - cam.translation) @ cam.rotation


# -- PGM -----------------------------------------------------------------------

def encode_depth16(depth: np.ndarray, znear: float, zfar: float) -> np.ndarray:
    """Linear depth in ``[znear, zfar]`` to ``[1, 65535]``; empty pixels become 0."""
    filled = depth != EMPTY
    scaled = np.clip((depth - znear) / (zfar - znear), 0.0, 1.0)
    return np.where(filled, 1 + np.rint(scaled * 65534), 0).astype(np.uint16)


def decode_depth16(code: np.ndarray, znear: float, zfar: float) -> np.ndarray:
    code = np.asarray(code, dtype=np.float64)
    return np.where(code > 0, znear + (code - 1) / 65534 * (zfar - znear), EMPTY)


def write_pgm(path, depth: np.ndarray, znear: float, zfar: float) -> None:
    """16-bit binary PGM; the z-range travels in a header comment."""
    code = encode_depth16(np.asarray(depth, dtype=np.float64), znear, zfar)
    h, w = code.shape
    header = f"P5\n# zrange {znear!r} {zfar!r}\n{w} {h}\n65535\n".encode("ascii")
    Path(path).write_bytes(header + code.astype(">u2").tobytes())


def read_pgm(path):
    """Return ``(depth, znear, zfar)`` from a file written by :func:`write_pgm`."""
    raw = Path(path).read_bytes()
    tokens, comments, pos = [], [], 0
    while len(tokens) < 4:
        end = raw.index(b"\n", pos)
        line = raw[pos:end].decode("ascii")
        pos = end + 1
        if line.startswith("#"):
            comments.append(line)
        else:
            tokens.extend(line.split())
    if tokens[0] != "P5" or int(tokens[3]) != 65535:
        raise ValueError(f"{path}: expected a 16-bit P5 PGM")
    w, h = int(tokens[1]), int(tokens[2])
    zr = [c.split()[2:4] for c in comments if c.startswith("# zrange")]
    if not zr:
        raise ValueError(f"{path}: missing '# zrange' header comment")
    znear, zfar = float(zr[0][0]), float(zr[0][1])
    code = np.frombuffer(raw, dtype=">u2", count=w * h, offset=pos).reshape(h, w)
    return decode_depth16(code, znear, zfar), znear, zfar
