"""Synthetic desk-scale scenes: labeled primitives, embedding tables, and
rendered depth + feature frame sequences.

Scenes are collections of axis-aligned planes and boxes with class labels.
Frames are rendered by splatting the ground-truth points through a pinhole
camera with a z-buffer; noise models reproduce cross-frame label
inconsistency (whole-object swaps per frame), per-view angular perturbation
of embeddings, and boundary bleeding near depth discontinuities.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .pipeline import CameraIntrinsics, Frame

_AXIS_NAMES = {"x": 0, "y": 1, "z": 2}


@dataclass
class Plane:
    """Axis-aligned rectangle; `axis` is the normal direction."""

    class_id: int
    axis: int
    offset: float
    u_range: tuple[float, float]
    v_range: tuple[float, float]

    def area(self) -> float:
        return abs(self.u_range[1] - self.u_range[0]) * abs(self.v_range[1] - self.v_range[0])

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        u = rng.uniform(*self.u_range, size=n)
        v = rng.uniform(*self.v_range, size=n)
        pts = np.empty((n, 3))
        pts[:, self.axis] = self.offset
        pts[:, (self.axis + 1) % 3] = u
        pts[:, (self.axis + 2) % 3] = v
        return pts


@dataclass
class Box:
    """Axis-aligned cuboid; samples its faces. Bottom faces are excluded by
    default (desk objects rest on a surface; their undersides are never
    observable and would only poison coverage metrics)."""

    class_id: int
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    include_bottom: bool = False

    def faces(self) -> list[tuple[int, int]]:
        out = [(axis, sign) for axis in range(3) for sign in (-1, 1)]
        if not self.include_bottom:
            out.remove((2, -1))
        return out

    def area(self) -> float:
        s = self.size
        total = 0.0
        for axis, _ in self.faces():
            a, b = (axis + 1) % 3, (axis + 2) % 3
            total += s[a] * s[b]
        return total

    def sample(self, rng: np.random.Generator, density: float) -> np.ndarray:
        c = np.asarray(self.center)
        s = np.asarray(self.size)
        chunks = []
        for axis, sign in self.faces():
            a, b = (axis + 1) % 3, (axis + 2) % 3
            n = int(round(density * s[a] * s[b]))
            if n == 0:
                continue
            pts = np.empty((n, 3))
            pts[:, axis] = c[axis] + sign * s[axis] / 2
            pts[:, a] = rng.uniform(c[a] - s[a] / 2, c[a] + s[a] / 2, size=n)
            pts[:, b] = rng.uniform(c[b] - s[b] / 2, c[b] + s[b] / 2, size=n)
            chunks.append(pts)
        return np.vstack(chunks) if chunks else np.empty((0, 3))

    def contains(self, points: np.ndarray, margin: float = 1e-9) -> np.ndarray:
        c = np.asarray(self.center)
        half = np.asarray(self.size) / 2 - margin
        return np.all(np.abs(points - c) < half, axis=1)


@dataclass
class NoiseModel:
    swap_prob: float = 0.0    # per frame per object: replace class embedding
    wobble_deg: float = 0.0   # per frame per object: random angular perturbation
    edge_px: int = 0          # bleed features across depth discontinuities

    @property
    def is_none(self) -> bool:
        return self.swap_prob == 0 and self.wobble_deg == 0 and self.edge_px == 0


@dataclass
class SceneSpec:
    extent: tuple[float, float, float] = (4.0, 4.0, 3.0)
    classes: int = 2
    feature_dim: int = 64
    density: float = 400.0    # points per square meter
    embedding_scheme: str = "orthogonal"   # or "separated"
    embedding_separation: float = 0.3      # pairwise cosine distance, "separated"
    noise: NoiseModel = field(default_factory=NoiseModel)
    primitives: list = field(default_factory=list)

    def validate(self) -> None:
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.density <= 0:
            raise ValueError("density must be positive")
        if self.embedding_scheme not in ("orthogonal", "separated"):
            raise ValueError(f"unknown embedding scheme {self.embedding_scheme!r}")
        if not 0 < self.embedding_separation < 2:
            raise ValueError("embedding separation must lie in (0, 2)")
        half = np.asarray(self.extent) / 2
        for prim in self.primitives:
            if not 0 <= prim.class_id < self.classes:
                raise ValueError(f"class id {prim.class_id} out of range")
            if prim.area() <= 0:
                raise ValueError("degenerate primitive with zero area")
            if isinstance(prim, Box):
                lo = np.asarray(prim.center) - np.asarray(prim.size) / 2
                hi = np.asarray(prim.center) + np.asarray(prim.size) / 2
                if np.any(lo < -half) or np.any(hi > half):
                    raise ValueError("box outside scene extents")


@dataclass
class GroundTruth:
    points: np.ndarray       # (N, 3)
    class_ids: np.ndarray    # (N,)
    object_ids: np.ndarray   # (N,) primitive index, for object-level noise
    embeddings: np.ndarray   # (C, D)
    names: list[str]


def make_embeddings(scheme: str, classes: int, dim: int, separation: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Class embedding table.

    orthogonal: standard basis rows (pairwise cosine exactly 0).
    separated: a shared component plus per-class orthonormal components so
    every pair sits at cosine distance exactly `separation`.
    """
    if scheme == "orthogonal":
        if classes > dim:
            raise ValueError("orthogonal scheme needs classes <= dim")
        return np.eye(dim, dtype=np.float64)[:classes]
    if classes + 1 > dim:
        raise ValueError("separated scheme needs classes + 1 <= dim")
    basis, _ = np.linalg.qr(rng.standard_normal((dim, classes + 1)))
    shared = basis[:, 0]
    per_class = basis[:, 1:].T
    emb = np.sqrt(1.0 - separation) * shared[None, :] + np.sqrt(separation) * per_class
    return emb


def generate_scene(spec: SceneSpec, seed: int) -> GroundTruth:
    """Surface-sample every primitive at the spec density.

    Deterministic for a fixed seed. Points falling strictly inside another
    box's volume are discarded (they could never be observed).
    """
    spec.validate()
    if not spec.primitives:
        raise ValueError("scene has no primitives")
    rng = np.random.default_rng(seed)
    emb = make_embeddings(spec.embedding_scheme, spec.classes, spec.feature_dim,
                          spec.embedding_separation, rng)
    chunks, cls, obj = [], [], []
    boxes = [p for p in spec.primitives if isinstance(p, Box)]
    for index, prim in enumerate(spec.primitives):
        if isinstance(prim, Box):
            pts = prim.sample(rng, spec.density)
        else:
            pts = prim.sample(rng, int(round(spec.density * prim.area())))
        keep = np.ones(pts.shape[0], dtype=bool)
        for box in boxes:
            if box is prim:
                continue
            keep &= ~box.contains(pts)
        pts = pts[keep]
        chunks.append(pts)
        cls.append(np.full(pts.shape[0], prim.class_id, dtype=np.int64))
        obj.append(np.full(pts.shape[0], index, dtype=np.int64))
    names = [f"class_{c:02d}" for c in range(spec.classes)]
    return GroundTruth(
        points=np.vstack(chunks),
        class_ids=np.concatenate(cls),
        object_ids=np.concatenate(obj),
        embeddings=emb,
        names=names,
    )


# -- camera paths -------------------------------------------------------------


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """Camera-to-world pose looking from position to target, +y down image."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("look_at target coincides with position")
    z = forward / norm
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    xn = np.linalg.norm(x)
    if xn < 1e-9:
        # Looking straight along `up`; pick an arbitrary horizontal right.
        x = np.array([1.0, 0.0, 0.0])
        xn = 1.0
    x = x / xn
    y = np.cross(z, x)
    r = np.stack([x, y, z], axis=1)
    return r, position


def orbit_trajectory(center, radius: float, height: float, n_frames: int,
                     start_angle: float = 0.0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Full circle of poses at fixed height, all looking at `center`."""
    center = np.asarray(center, dtype=np.float64)
    poses = []
    for k in range(n_frames):
        ang = start_angle + 2.0 * np.pi * k / n_frames
        pos = center + np.array([radius * np.cos(ang), radius * np.sin(ang), height])
        poses.append(look_at(pos, center))
    return poses


# -- rendering ----------------------------------------------------------------


def _frame_class_table(gt: GroundTruth, noise: NoiseModel,
                       rng: np.random.Generator) -> np.ndarray:
    """Per-object embedding table for one frame, with object-level noise."""
    n_objects = int(gt.object_ids.max()) + 1 if gt.object_ids.size else 0
    object_class = np.zeros(n_objects, dtype=np.int64)
    for o in range(n_objects):
        members = np.flatnonzero(gt.object_ids == o)
        if members.size:
            object_class[o] = gt.class_ids[members[0]]
    table = gt.embeddings[object_class].copy()
    classes = gt.embeddings.shape[0]
    if noise.swap_prob > 0:
        for o in range(n_objects):
            if rng.random() < noise.swap_prob:
                wrong = int(rng.integers(classes - 1))
                if wrong >= object_class[o]:
                    wrong += 1
                table[o] = gt.embeddings[wrong]
    if noise.wobble_deg > 0:
        for o in range(n_objects):
            theta = np.deg2rad(rng.normal(0.0, noise.wobble_deg))
            direction = rng.standard_normal(table.shape[1])
            direction -= direction @ table[o] * table[o]
            dn = np.linalg.norm(direction)
            if dn > 1e-12:
                table[o] = np.cos(theta) * table[o] + np.sin(theta) * direction / dn
    return table


def _bleed_edges(depth: np.ndarray, feats: np.ndarray, k: int,
                 rng: np.random.Generator) -> None:
    """Swap features near depth discontinuities with a random neighbor's."""
    valid = depth > 0
    edge = np.zeros_like(valid)
    for axis in (0, 1):
        d1 = np.diff(depth, axis=axis)
        both = valid[tuple(slice(1, None) if a == axis else slice(None) for a in (0, 1))] & \
            valid[tuple(slice(None, -1) if a == axis else slice(None) for a in (0, 1))]
        jump = both & (np.abs(d1) > 0.1)
        if axis == 0:
            edge[1:, :] |= jump
            edge[:-1, :] |= jump
        else:
            edge[:, 1:] |= jump
            edge[:, :-1] |= jump
    zone = edge.copy()
    for _ in range(k - 1):
        grown = zone.copy()
        grown[1:, :] |= zone[:-1, :]
        grown[:-1, :] |= zone[1:, :]
        grown[:, 1:] |= zone[:, :-1]
        grown[:, :-1] |= zone[:, 1:]
        zone = grown
    zone &= valid
    ys, xs = np.nonzero(zone)
    if ys.size == 0:
        return
    h, w = depth.shape
    oy = rng.integers(-k, k + 1, size=ys.size)
    ox = rng.integers(-k, k + 1, size=xs.size)
    ny = np.clip(ys + oy, 0, h - 1)
    nx = np.clip(xs + ox, 0, w - 1)
    donor_ok = valid[ny, nx]
    feats[ys[donor_ok], xs[donor_ok]] = feats[ny[donor_ok], nx[donor_ok]]


def render_frames(gt: GroundTruth, trajectory, intrinsics: CameraIntrinsics,
                  noise: NoiseModel | None = None, seed: int = 0) -> list[Frame]:
    """Point-splat z-buffer rendering of the ground truth along a trajectory.

    Each pixel takes the nearest point's depth and its (noisy) object
    embedding. Noise draws are seeded per frame, so any frame re-renders
    identically in isolation. Frames that see no points come back all-invalid.
    """
    noise = noise or NoiseModel()
    frames = []
    h, w = intrinsics.height, intrinsics.width
    dim = gt.embeddings.shape[1]
    for f_idx, (rot, trans) in enumerate(trajectory):
        rng = np.random.default_rng([seed, f_idx])
        table = _frame_class_table(gt, noise, rng)

        cam = (gt.points - trans) @ rot  # camera frame
        z = cam[:, 2]
        in_front = z > 0.05
        u = np.floor(intrinsics.fx * cam[in_front, 0] / z[in_front] + intrinsics.cx + 0.5).astype(np.int64)
        v = np.floor(intrinsics.fy * cam[in_front, 1] / z[in_front] + intrinsics.cy + 0.5).astype(np.int64)
        zf = z[in_front]
        obj = gt.object_ids[in_front]
        inside = (u >= 0) & (u < w) & (v >= 0) & (v < h)
        u, v, zf, obj = u[inside], v[inside], zf[inside], obj[inside]

        depth = np.zeros((h, w), dtype=np.float32)
        feats = np.zeros((h, w, dim), dtype=np.float32)
        if zf.size:
            flat = v * w + u
            order = np.lexsort((zf, flat))
            flat_sorted = flat[order]
            first = np.ones(flat_sorted.size, dtype=bool)
            first[1:] = flat_sorted[1:] != flat_sorted[:-1]
            win = order[first]
            depth.ravel()[flat[win]] = zf[win].astype(np.float32)
            feats.reshape(-1, dim)[flat[win]] = table[obj[win]].astype(np.float32)
            if noise.edge_px > 0:
                _bleed_edges(depth, feats, noise.edge_px, rng)
        frames.append(Frame(depth=depth, features=feats, rotation=rot, translation=trans))
    return frames
