"""Procedural box-assembly shapes whose back side is hidden from a canonical view.

Three families, all built from axis-aligned boxes inside ``[-0.5, 0.5]^3``
(world y is up, the canonical camera sits on the +z axis at elevation 0):

``chairlike``
    Seat, legs, backrest facing the canonical camera, optional armrests
    tucked behind the backrest. Hidden parameter: which arms exist.
``boxcar``
    Body with a cabin on top, seen head-on. Hidden parameters: body and
    cabin length.
``tee``
    A T profile extruded backwards. Hidden parameters: extrusion depth of
    bar and stem.

``symmetric=True`` forces mirror symmetry about ``x = 0``; otherwise arms and
cabin/stem offsets may break it. Every family has "twins": shapes that differ
only in hidden parameters and therefore give identical canonical renders.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from .geom import Camera, ViewRing, camera_at, sample_view_ring, write_ply, read_ply
from .metrics import chamfer
from .render import decode_depth16, encode_depth16, read_pgm, view_based_sample, write_pgm

FAMILIES = ("chairlike", "boxcar", "tee")


class BadSpec(ValueError):
    pass


@dataclass(frozen=True)
class ShapeSpec:
    """Family plus its parameters; ``params`` is a sorted tuple of (name, value)."""

    family: str
    symmetric: bool = True
    params: tuple = ()
    sample_count: int = 64
    seed: int = 0

    @property
    def p(self) -> dict:
        return dict(self.params)

    def with_params(self, **kw) -> "ShapeSpec":
        merged = self.p
        merged.update(kw)
        return replace(self, params=tuple(sorted(merged.items())))


# Documented ranges: (low, high) for reals, allowed set for discrete values.
PARAM_RANGES = {
    "chairlike": {
        "width": (0.55, 0.8), "depth": (0.5, 0.8), "back_height": (0.3, 0.45),
        "arms": ("none", "left", "right", "both"),
    },
    "boxcar": {
        "width": (0.5, 0.8), "body_top": (0.02, 0.12), "cabin_height": (0.15, 0.3),
        "cabin_width": (0.3, 0.6), "cabin_offset": (-0.1, 0.1),
        "body_length": (0.45, 0.9), "cabin_length": (0.2, 0.6),
    },
    "tee": {
        "bar_width": (0.6, 0.95), "bar_low": (-0.15, -0.05), "bar_high": (0.05, 0.2),
        "stem_width": (0.15, 0.35), "stem_offset": (-0.1, 0.1),
        "bar_depth": (0.15, 0.9), "stem_depth": (0.15, 0.9),
    },
}

HIDDEN_PARAMS = {
    "chairlike": ("arms",),
    "boxcar": ("body_length", "cabin_length"),
    "tee": ("bar_depth", "stem_depth"),
}


def _draw(rng, family: str, symmetric: bool, names) -> dict:
    out = {}
    for name in names:
        rng_def = PARAM_RANGES[family][name]
        if isinstance(rng_def[0], str):
            choices = ("none", "both") if (symmetric and name == "arms") else rng_def
            out[name] = choices[int(rng.integers(len(choices)))]
        else:
            out[name] = float(rng.uniform(*rng_def))
    return out


def random_spec(family: str, rng: np.random.Generator, symmetric: bool = True,
                sample_count: int = 64, visible: dict | None = None) -> ShapeSpec:
    """Draw a spec; pass ``visible`` to reuse another shape's visible parameters."""
    if family not in FAMILIES:
        raise BadSpec(f"unknown family {family!r}")
    names = list(PARAM_RANGES[family])
    hidden = HIDDEN_PARAMS[family]
    params = dict(visible) if visible else _draw(rng, family, symmetric, [n for n in names if n not in hidden])
    params.update(_draw(rng, family, symmetric, hidden))
    if symmetric:
        for key in ("cabin_offset", "stem_offset"):
            if key in params:
                params[key] = 0.0
    seed = int(rng.integers(2**31))
    return ShapeSpec(family, symmetric, tuple(sorted(params.items())), sample_count, seed)


def visible_params(spec: ShapeSpec) -> dict:
    return {k: v for k, v in spec.params if k not in HIDDEN_PARAMS[spec.family]}


def _box(x0, x1, y0, y1, z0, z1):
    return np.array([[x0, y0, z0], [x1, y1, z1]], dtype=np.float64)


def _validate(spec: ShapeSpec) -> dict:
    if spec.family not in FAMILIES:
        raise BadSpec(f"unknown family {spec.family!r}")
    if spec.sample_count < 1:
        raise BadSpec("sample_count must be >= 1")
    p = spec.p
    for name, rng_def in PARAM_RANGES[spec.family].items():
        if name not in p:
            raise BadSpec(f"{spec.family}: missing parameter {name!r}")
        val = p[name]
        if isinstance(rng_def[0], str):
            if val not in rng_def:
                raise BadSpec(f"{name}={val!r} not in {rng_def}")
        elif not rng_def[0] - 1e-12 <= val <= rng_def[1] + 1e-12:
            raise BadSpec(f"{name}={val!r} outside {rng_def}")
    if spec.symmetric:
        if p.get("arms") in ("left", "right") or p.get("cabin_offset", 0.0) != 0.0 or p.get("stem_offset", 0.0) != 0.0:
            raise BadSpec("symmetric spec with an asymmetric parameter")
    return p


def shape_boxes(spec: ShapeSpec) -> np.ndarray:
    """The boxes ``(K, 2, 3)`` (min corner, max corner) making up the shape."""
    p = _validate(spec)
    boxes = []
    if spec.family == "chairlike":
        w, d, bh = p["width"], p["depth"], p["back_height"]
        front, back = -d / 2, d / 2
        boxes.append(_box(-w / 2, w / 2, -0.05, 0.0, front, back))            # seat
        boxes.append(_box(-w / 2, w / 2, -0.05, bh, back - 0.06, back))        # backrest
        for sx in (-1, 1):
            for z0 in (front, back - 0.05):
                x0 = sx * (w / 2 - 0.025) - 0.025
                boxes.append(_box(x0, x0 + 0.05, -0.45, -0.05, z0, z0 + 0.05))
        sides = {"none": (), "left": (-1,), "right": (1,), "both": (-1, 1)}[p["arms"]]
        for sx in sides:
            x0 = sx * (w / 2 - 0.06) - 0.03
            boxes.append(_box(x0, x0 + 0.06, 0.12, 0.17, front, back - 0.06))   # arm rest
            boxes.append(_box(x0, x0 + 0.06, 0.0, 0.12, front, front + 0.05))   # arm post
    elif spec.family == "boxcar":
        w, top, zf = p["width"], p["body_top"], 0.45
        length = p["body_length"]
        cw = min(p["cabin_width"], w - 0.05)
        off = float(np.clip(p["cabin_offset"], -(w - cw) / 2, (w - cw) / 2))
        off = float(np.clip(off, -(cw / 2 - 0.02), cw / 2 - 0.02))
        cl = min(p["cabin_length"], length - 0.15)
        boxes.append(_box(-w / 2, w / 2, -0.4, top, zf - length, zf))
        boxes.append(_box(off - cw / 2, off + cw / 2, top, top + p["cabin_height"], zf - 0.1 - cl, zf - 0.1))
    else:
        tw, lo, hi, zf = p["bar_width"], p["bar_low"], p["bar_high"], 0.45
        sw, so = p["stem_width"], p["stem_offset"]
        so = float(np.clip(so, -(sw / 2 - 0.02), sw / 2 - 0.02))
        boxes.append(_box(-tw / 2, tw / 2, lo, hi, zf - p["bar_depth"], zf))
        boxes.append(_box(so - sw / 2, so + sw / 2, -0.45, lo, zf - p["stem_depth"], zf))
    return np.stack(boxes)


def _face_table(boxes: np.ndarray):
    faces, areas = [], []        # (box index, fixed axis, side), face area
    for k, (lo, hi) in enumerate(boxes):
        ext = hi - lo
        for axis in range(3):
            a, b = [i for i in range(3) if i != axis]
            for side in (0, 1):
                faces.append((k, axis, side))
                areas.append(ext[a] * ext[b])
    return faces, np.asarray(areas)


def _surface_points(boxes: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Map unit-cube samples ``u`` (m, 3) to box surfaces and drop points inside other boxes.

    ``u[:, 0]`` picks a face through the area CDF (and is then rescaled inside
    that face's interval), ``u[:, 1:]`` the position on it, so an evenly spread
    ``u`` gives area-uniform, evenly spread surface points.
    """
    faces, areas = _face_table(boxes)
    cdf = np.cumsum(areas) / areas.sum()
    pick = np.minimum(np.searchsorted(cdf, u[:, 0], side="right"), len(faces) - 1)
    lo_cdf = np.concatenate([[0.0], cdf[:-1]])[pick]
    t = np.clip((u[:, 0] - lo_cdf) / np.maximum(cdf[pick] - lo_cdf, 1e-300), 0.0, 1.0)
    pts = np.empty((len(u), 3))
    for i, f in enumerate(pick):
        k, axis, side = faces[f]
        lo, hi = boxes[k]
        a, b = [j for j in range(3) if j != axis]
        pts[i, axis] = hi[axis] if side else lo[axis]
        pts[i, a] = lo[a] + t[i] * (hi[a] - lo[a])
        pts[i, b] = lo[b] + u[i, 1] * (hi[b] - lo[b])
    tol = 1e-9
    inside = np.zeros(len(u), dtype=bool)
    for lo, hi in boxes:
        inside |= np.all((pts > lo + tol) & (pts < hi - tol), axis=1)
    return pts[~inside]


def _sample_surface(boxes: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. uniform samples on the union of box surfaces."""
    out, have = [], 0
    while have < count:
        keep = _surface_points(boxes, rng.uniform(size=(2 * (count - have) + 16, 3)))
        out.append(keep[: count - have])
        have += len(out[-1])
    return np.concatenate(out)


def _quasi_surface(boxes: np.ndarray, count: int, seed: int) -> np.ndarray:
    """First ``count`` surviving points of a scrambled Halton sequence mapped onto the surface.

    The sequence depends only on ``seed``: shapes that share it and differ a
    little in their parameters get point layouts that differ a little.
    """
    halton = qmc.Halton(d=3, scramble=True, seed=seed)
    out, have = [], 0
    while have < count:
        keep = _surface_points(boxes, halton.random(2 * (count - have) + 16))
        out.append(keep[: count - have])
        have += len(out[-1])
    return np.concatenate(out)


def make_shape(spec: ShapeSpec) -> np.ndarray:
    """``spec.sample_count`` evenly spread surface points from a seeded low-discrepancy sequence."""
    pts = _quasi_surface(shape_boxes(spec), spec.sample_count, spec.seed)
    if np.any(np.abs(pts) > 0.5 + 1e-9):
        raise BadSpec("shape leaves the unit cube")
    return pts


def mirror_x(points) -> np.ndarray:
    out = np.array(points, dtype=np.float64)
    out[:, 0] *= -1
    return out


# -- ray casting ---------------------------------------------------------------

def raycast_depth(boxes: np.ndarray, cam: Camera) -> np.ndarray:
    """Exact camera-space depth of the box union through every pixel centre (0 = miss)."""
    h, w = cam.height, cam.width
    cols, rows = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    dirs_cam = np.stack([(cols - cam.cx) / cam.fx, (rows - cam.cy) / cam.fy, np.ones_like(cols)], -1).reshape(-1, 3)
    dirs = dirs_cam @ cam.rotation           # world-space, camera-z component is 1
    origin = cam.center
    best = np.full(dirs.shape[0], np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        for lo, hi in boxes:
            t0 = (lo - origin) * inv
            t1 = (hi - origin) * inv
            tmin = np.nanmax(np.minimum(t0, t1), axis=1)
            tmax = np.nanmin(np.maximum(t0, t1), axis=1)
            hit = (tmax >= tmin) & (tmax > 0)
            best = np.where(hit, np.minimum(best, np.maximum(tmin, 0.0)), best)
    depth = np.where(np.isfinite(best), best, 0.0)   # t scales dirs_cam whose z is 1
    return depth.reshape(h, w)


def canonical_camera(radius: float = 2.5, **intrinsics) -> Camera:
    return camera_at(0.0, 0.0, radius, **intrinsics)


def depth_range(ring: ViewRing):
    return ring.radius - 1.0, ring.radius + 1.0


def image_input(depth: np.ndarray, znear: float, zfar: float, size: int = 16) -> np.ndarray:
    """Network input: nearness in (0, 1] (0 = background), box-averaged down to ``size``."""
    near = np.where(depth > 0, (zfar - depth) / (zfar - znear), 0.0)
    h, w = near.shape
    if h % size or w % size:
        raise ValueError(f"cannot box-average {h}x{w} down to {size}x{size}")
    return near.reshape(size, h // size, size, w // size).mean(axis=(1, 3))


# -- dataset -------------------------------------------------------------------

@dataclass
class DatasetRecord:
    shape_id: str
    family: str
    split: str
    points: np.ndarray
    cameras: list
    depths: list                      # per view, quantised (H, W) depth
    fronts: list                      # per view, front indices into points
    twin: str = ""
    spec: ShapeSpec | None = None


@dataclass
class Dataset:
    records: list
    ring: ViewRing
    sample_resolution: int
    image_size: int = 16
    _images: dict = field(default_factory=dict, repr=False)

    @property
    def train(self):
        return [r for r in self.records if r.split == "train"]

    @property
    def test(self):
        return [r for r in self.records if r.split == "test"]

    def sampling_camera(self, cam: Camera) -> Camera:
        return cam.scaled(self.sample_resolution / cam.width)

    def images(self, rec: DatasetRecord) -> np.ndarray:
        """Flattened network inputs ``(views, image_size**2)`` for one record."""
        if rec.shape_id not in self._images:
            znear, zfar = depth_range(self.ring)
            self._images[rec.shape_id] = np.stack(
                [image_input(d, znear, zfar, self.image_size).ravel() for d in rec.depths])
        return self._images[rec.shape_id]


def make_record(spec: ShapeSpec, shape_id: str, ring: ViewRing, rng, sample_resolution: int,
                split: str = "train", twin: str = "") -> DatasetRecord:
    pts = make_shape(spec)
    boxes = shape_boxes(spec)
    cams = sample_view_ring(ring, rng)
    znear, zfar = depth_range(ring)
    depths = [decode_depth16(encode_depth16(raycast_depth(boxes, c), znear, zfar), znear, zfar) for c in cams]
    fronts = [view_based_sample(pts, c.scaled(sample_resolution / c.width)).front_indices for c in cams]
    return DatasetRecord(shape_id, spec.family, split, pts, cams, depths, fronts, twin, spec)


def split_assignment(n: int, rng: np.random.Generator, train_fraction: float = 0.8) -> list:
    """Seeded 80/20 split; the train count is ``ceil(0.8 n)`` so n=1 yields one train entry."""
    n_train = int(np.ceil(train_fraction * n - 1e-9))
    order = rng.permutation(n)
    split = ["test"] * n
    for i in order[:n_train]:
        split[i] = "train"
    return split


def generate_dataset(n_shapes: int, families=FAMILIES, ring: ViewRing | None = None,
                     symmetric: bool = False, sample_count: int = 64,
                     sample_resolution: int = 16, seed: int = 0, coherent_sampling: bool = True) -> Dataset:
    """In-memory corpus. Asymmetric corpora are built from twin pairs sharing visible parameters.

    With ``coherent_sampling`` every shape draws its surface samples from the
    same random stream, so similar shapes get similar point layouts and
    distances between 64-point clouds reflect geometry rather than sampling
    luck.
    """
    ring = ring or ViewRing(random_phase=True, seed=seed)
    rng = np.random.default_rng(seed)
    split = split_assignment(n_shapes, rng)
    records, prev = [], None
    for i in range(n_shapes):
        family = families[(i // 2) % len(families)] if not symmetric else families[i % len(families)]
        twin_of = prev if (not symmetric and i % 2 == 1) else None
        visible = visible_params(twin_of[1]) if twin_of else None
        spec = random_spec(family, rng, symmetric=symmetric, sample_count=sample_count, visible=visible)
        if coherent_sampling:
            spec = replace(spec, seed=seed)
        sid = f"{family}_{i:04d}"
        rec = make_record(spec, sid, ring, rng, sample_resolution, split[i], twin_of[0] if twin_of else "")
        if twin_of:
            records[-1].twin = sid
        records.append(rec)
        prev = (sid, spec)
    return Dataset(records, ring, sample_resolution)


def twin_pairs(ds: Dataset):
    by_id = {r.shape_id: r for r in ds.records}
    return [(r, by_id[r.twin]) for r in ds.records if r.twin and r.shape_id < r.twin]


def verify_ambiguity(a: ShapeSpec, b: ShapeSpec, radius: float = 2.5) -> tuple:
    """``(max |depth difference| on the canonical view, full-cloud CD x100)`` for two specs."""
    cam = canonical_camera(radius)
    da, db = raycast_depth(shape_boxes(a), cam), raycast_depth(shape_boxes(b), cam)
    both = (da > 0) & (db > 0)
    diff = float(np.max(np.abs(da - db)[both], initial=0.0))
    if not np.array_equal(da > 0, db > 0):
        diff = float("inf")
    cd = 100.0 * sum(chamfer(make_shape(a), make_shape(b), reduction="mean"))
    return diff, cd


# -- persistence ---------------------------------------------------------------

def _spec_text(spec: ShapeSpec) -> str:
    lines = [f"family = {spec.family}", f"symmetric = {int(spec.symmetric)}",
             f"sample_count = {spec.sample_count}", f"seed = {spec.seed}"]
    lines += [f"param.{k} = {v!r}" if not isinstance(v, str) else f"param.{k} = {v}" for k, v in spec.params]
    return "\n".join(lines) + "\n"


def _spec_from_text(text: str) -> ShapeSpec:
    kv = dict(line.split(" = ", 1) for line in text.splitlines() if line.strip())
    params = []
    for k, v in kv.items():
        if k.startswith("param."):
            try:
                params.append((k[6:], float(v)))
            except ValueError:
                params.append((k[6:], v))
    return ShapeSpec(kv["family"], bool(int(kv["symmetric"])), tuple(sorted(params)),
                     int(kv["sample_count"]), int(kv["seed"]))


def build_dataset(n_shapes: int, families, ring: ViewRing, out_dir, symmetric: bool = False,
                  sample_count: int = 64, sample_resolution: int = 16, seed: int = 0,
                  coherent_sampling: bool = True) -> str:
    """Generate a corpus and write it under ``out_dir``; returns the manifest text.

    Layout per shape ``<id>``: ``<id>.ply``, ``<id>.spec.txt`` and for each view
    ``k``: ``<id>_v<k>.pgm``, ``<id>_v<k>.cam.txt``, ``<id>_v<k>.front.txt``.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IOError(f"cannot create {out}: {exc}") from exc
    ds = generate_dataset(n_shapes, families, ring, symmetric, sample_count, sample_resolution, seed,
                          coherent_sampling)
    znear, zfar = depth_range(ring)
    lines = [f"# ring view_count={ring.view_count} range={ring.longitudinal_range[0]!r},{ring.longitudinal_range[1]!r} "
             f"radius={ring.radius!r} seed={ring.seed} random_phase={int(ring.random_phase)} "
             f"sample_resolution={sample_resolution}",
             "shape_id\tfamily\tsplit\tfiles\ttwin"]
    for rec in ds.records:
        files = [f"{rec.shape_id}.ply", f"{rec.shape_id}.spec.txt"]
        write_ply(out / files[0], rec.points)
        (out / files[1]).write_text(_spec_text(rec.spec))
        for k, (cam, depth, front) in enumerate(zip(rec.cameras, rec.depths, rec.fronts)):
            stem = f"{rec.shape_id}_v{k}"
            write_pgm(out / f"{stem}.pgm", depth, znear, zfar)
            cam.save(out / f"{stem}.cam.txt")
            (out / f"{stem}.front.txt").write_text(" ".join(map(str, front.tolist())) + "\n")
            files += [f"{stem}.pgm", f"{stem}.cam.txt", f"{stem}.front.txt"]
        lines.append("\t".join([rec.shape_id, rec.family, rec.split, ",".join(files), rec.twin or "-"]))
    manifest = "\n".join(lines) + "\n"
    (out / "manifest.txt").write_text(manifest)
    return manifest


def load_dataset(out_dir) -> Dataset:
    out = Path(out_dir)
    text = (out / "manifest.txt").read_text().splitlines()
    meta = dict(tok.split("=", 1) for tok in text[0][len("# ring "):].split())
    lo, hi = (float(x) for x in meta["range"].split(","))
    ring = ViewRing(int(meta["view_count"]), (lo, hi), float(meta["radius"]), int(meta["seed"]),
                    bool(int(meta["random_phase"])))
    res = int(meta["sample_resolution"])
    records = []
    for line in text[2:]:
        sid, family, split, files, twin = line.split("\t")
        names = files.split(",")
        views = sorted({n.rsplit(".", 2)[0] for n in names if "_v" in n}, key=lambda s: int(s.rsplit("_v", 1)[1]))
        cams = [Camera.load(out / f"{v}.cam.txt") for v in views]
        depths = [read_pgm(out / f"{v}.pgm")[0] for v in views]
        fronts = [np.array((out / f"{v}.front.txt").read_text().split(), dtype=np.int64) for v in views]
        spec = _spec_from_text((out / f"{sid}.spec.txt").read_text())
        records.append(DatasetRecord(sid, family, split, read_ply(out / f"{sid}.ply"), cams, depths, fronts,
                                     "" if twin == "-" else twin, spec))
    return Dataset(records, ring, res)


def manifest_digest(manifest: str) -> str:
    return hashlib.sha256(manifest.encode()).hexdigest()
