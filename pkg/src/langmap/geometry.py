"""Sparse multi-level voxel grid with shared learnable corner features.

Each active level maps integer voxel coordinates to a record of 8 corner rows
in a per-level corner table; corners shared between adjacent voxels reference
the same row. The coarsest level additionally owns one high-dimensional
learnable vector per voxel. Point encodings are trilinear interpolations of
the corner features, summed across levels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

# Voxel/corner indices are packed into int64 dict keys, 21 bits per axis.
_KEY_BITS = 21
_KEY_OFFSET = 1 << (_KEY_BITS - 1)
_KEY_LIMIT = _KEY_OFFSET  # |index| must stay below this

# Corner order: binary (dx, dy, dz) offsets 000, 001, ... 111 (z fastest).
CORNER_OFFSETS = np.array(
    [(dx, dy, dz) for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)],
    dtype=np.int64,
)


class UnmappedPointError(KeyError):
    """Raised when a query point lies outside every observed fine voxel."""


def _pack(keys: np.ndarray) -> np.ndarray:
    """Pack (N, 3) integer voxel coordinates into int64 scalars."""
    k = np.asarray(keys, dtype=np.int64)
    if np.any(np.abs(k) >= _KEY_LIMIT):
        raise ValueError(f"voxel index out of supported range +-{_KEY_LIMIT}")
    return (
        ((k[..., 0] + _KEY_OFFSET) << (2 * _KEY_BITS))
        | ((k[..., 1] + _KEY_OFFSET) << _KEY_BITS)
        | (k[..., 2] + _KEY_OFFSET)
    )


def _unpack(packed: np.ndarray) -> np.ndarray:
    p = np.asarray(packed, dtype=np.int64)
    mask = (1 << _KEY_BITS) - 1
    out = np.stack(
        [(p >> (2 * _KEY_BITS)) & mask, (p >> _KEY_BITS) & mask, p & mask],
        axis=-1,
    )
    return out - _KEY_OFFSET


@dataclass(frozen=True)
class OctreeConfig:
    fine_resolution: float = 0.05
    levels: tuple[int, ...] = (8, 9, 10)
    corner_feature_dim: int = 16
    f_vector_dim: int = 512
    dtype: type = np.float32

    def __post_init__(self):
        if self.fine_resolution <= 0:
            raise ValueError("fine_resolution must be positive")
        if len(self.levels) < 1 or any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ValueError("levels must be a non-empty strictly increasing sequence")
        if self.corner_feature_dim <= 0 or self.f_vector_dim <= 0:
            raise ValueError("feature dimensions must be positive")

    def edge_length(self, level: int) -> float:
        if level not in self.levels:
            raise ValueError(f"level {level} is not an active level {self.levels}")
        return self.fine_resolution * 2 ** (self.levels[-1] - level)

    @property
    def fine_level(self) -> int:
        return self.levels[-1]

    @property
    def coarse_level(self) -> int:
        return self.levels[0]


class _Rows:
    """Capacity-doubling 2-D row store; `view` exposes the filled prefix."""

    def __init__(self, width: int, dtype):
        self._buf = np.empty((16, width), dtype=dtype)
        self.count = 0

    @property
    def view(self) -> np.ndarray:
        return self._buf[: self.count]

    def append(self, rows: np.ndarray) -> None:
        n = self.count + rows.shape[0]
        if n > self._buf.shape[0]:
            cap = max(n, 2 * self._buf.shape[0])
            grown = np.empty((cap, self._buf.shape[1]), dtype=self._buf.dtype)
            grown[: self.count] = self._buf[: self.count]
            self._buf = grown
        self._buf[self.count : n] = rows
        self.count = n


class _LevelStore:
    def __init__(self, feature_dim: int, dtype):
        self.voxel_rows: dict[int, int] = {}       # packed key -> voxel row
        self.voxel_keys: list[int] = []            # packed, by voxel row
        self.corner_rows_of_voxel = _Rows(8, np.int32)
        self.corner_rows: dict[int, int] = {}      # packed corner key -> corner row
        self.corner_keys: list[int] = []
        self.corner_features = _Rows(feature_dim, dtype)


@dataclass
class InsertReport:
    new_voxels: dict[int, int] = field(default_factory=dict)
    new_corners: dict[int, int] = field(default_factory=dict)
    new_f_vectors: int = 0
    new_coarse_rows: np.ndarray = field(default_factory=lambda: np.empty(0, np.int32))
    skipped_nonfinite: int = 0

    @property
    def total_new_voxels(self) -> int:
        return sum(self.new_voxels.values())


@dataclass
class InterpolationRecord:
    """Per-level corner rows and trilinear weights for a batch of points.

    Retains exactly which corner rows contribute to each point so gradients of
    the encoding can be scattered back; `operators` materializes the linear
    gather/scatter map as one sparse matrix per level (shape: corners x points,
    sized to the corner tables at call time).
    """

    levels: tuple[int, ...]
    rows: list[np.ndarray]     # per level (N, 8) int32
    weights: list[np.ndarray]  # per level (N, 8)

    @property
    def n_points(self) -> int:
        return self.rows[0].shape[0]

    def operators(self, corner_counts: list[int]) -> list[sp.csc_matrix]:
        n = self.n_points
        cols = np.repeat(np.arange(n, dtype=np.int32), 8)
        ops = []
        for rows, weights, count in zip(self.rows, self.weights, corner_counts):
            op = sp.csc_matrix(
                (weights.ravel(), (rows.ravel(), cols)), shape=(count, n)
            )
            ops.append(op)
        return ops


class SparseFeatureOctree:
    def __init__(self, config: OctreeConfig, rng: np.random.Generator | int | None = None):
        self.config = config
        self._rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self._levels = {lvl: _LevelStore(config.corner_feature_dim, config.dtype) for lvl in config.levels}
        self._f = _Rows(config.f_vector_dim, config.dtype)
        self.skipped_nonfinite = 0

    # -- keys ---------------------------------------------------------------

    def voxel_key(self, p, level: int) -> tuple[int, int, int]:
        p = np.asarray(p, dtype=np.float64)
        if not np.all(np.isfinite(p)):
            raise ValueError("non-finite point coordinates")
        edge = self.config.edge_length(level)
        return tuple(int(v) for v in np.floor(p / edge).astype(np.int64))

    def _keys_for(self, points: np.ndarray, level: int) -> np.ndarray:
        edge = self.config.edge_length(level)
        return np.floor(points / edge).astype(np.int64)

    # -- structure growth ----------------------------------------------------

    def insert_points(self, points, f_init: np.ndarray | None = None) -> InsertReport:
        """Create the containing voxel (with its corners) at every level.

        Newly created coarse voxels get an F vector: a copy of `f_init` when
        given, otherwise uniform random in [-1e-2, 1e-2]. New corner features
        are uniform random in [-1e-4, 1e-4]. Re-inserting known points creates
        nothing.
        """
        report = InsertReport()
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        finite = np.all(np.isfinite(points), axis=1)
        report.skipped_nonfinite = int((~finite).sum())
        self.skipped_nonfinite += report.skipped_nonfinite
        points = points[finite]
        if points.shape[0] == 0:
            return report

        cfg = self.config
        for level in cfg.levels:
            store = self._levels[level]
            packed = _pack(self._keys_for(points, level))
            fresh = np.unique(packed)
            fresh = fresh[[k not in store.voxel_rows for k in fresh.tolist()]]
            report.new_voxels[level] = fresh.size
            if fresh.size == 0:
                report.new_corners.setdefault(level, 0)
                continue

            base = _unpack(fresh)  # (V, 3)
            corner_keys = _pack(base[:, None, :] + CORNER_OFFSETS[None, :, :])  # (V, 8)
            flat = corner_keys.ravel()
            corner_rows = np.empty(flat.shape[0], dtype=np.int32)
            new_corner_count = 0
            lookup = store.corner_rows
            next_row = store.corner_features.count
            for i, key in enumerate(flat.tolist()):
                row = lookup.get(key)
                if row is None:
                    row = next_row
                    lookup[key] = row
                    store.corner_keys.append(key)
                    next_row += 1
                    new_corner_count += 1
                corner_rows[i] = row
            if new_corner_count:
                feats = self._rng.uniform(
                    -1e-4, 1e-4, size=(new_corner_count, cfg.corner_feature_dim)
                ).astype(cfg.dtype)
                store.corner_features.append(feats)
            report.new_corners[level] = new_corner_count

            row0 = len(store.voxel_keys)
            for j, key in enumerate(fresh.tolist()):
                store.voxel_rows[key] = row0 + j
                store.voxel_keys.append(key)
            store.corner_rows_of_voxel.append(corner_rows.reshape(-1, 8))

            if level == cfg.coarse_level:
                if f_init is not None:
                    f_new = np.broadcast_to(
                        np.asarray(f_init, dtype=cfg.dtype), (fresh.size, cfg.f_vector_dim)
                    ).copy()
                else:
                    f_new = self._rng.uniform(
                        -1e-2, 1e-2, size=(fresh.size, cfg.f_vector_dim)
                    ).astype(cfg.dtype)
                self._f.append(f_new)
                report.new_f_vectors = fresh.size
                report.new_coarse_rows = np.arange(row0, row0 + fresh.size, dtype=np.int32)
        return report

    # -- lookups ------------------------------------------------------------

    def contains(self, points) -> np.ndarray:
        """True where the point lies inside an observed fine-level voxel."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        store = self._levels[self.config.fine_level]
        out = np.zeros(points.shape[0], dtype=bool)
        finite = np.all(np.isfinite(points), axis=1)
        if not np.any(finite):
            return out
        packed = _pack(self._keys_for(points[finite], self.config.fine_level))
        out[finite] = [k in store.voxel_rows for k in packed.tolist()]
        return out

    def _voxel_rows_for(self, points: np.ndarray, level: int) -> np.ndarray:
        store = self._levels[level]
        packed = _pack(self._keys_for(points, level))
        rows = np.empty(points.shape[0], dtype=np.int64)
        lookup = store.voxel_rows
        missing = 0
        for i, key in enumerate(packed.tolist()):
            row = lookup.get(key, -1)
            if row < 0:
                missing += 1
            rows[i] = row
        if missing:
            raise UnmappedPointError(f"{missing} point(s) outside mapped space at level {level}")
        return rows

    def encode_points(self, points) -> tuple[np.ndarray, InterpolationRecord]:
        """Summed trilinear interpolation of corner features across levels.

        All points must lie inside observed fine voxels; use `contains` to
        pre-filter and handle unmapped points.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if not np.all(np.isfinite(points)):
            raise ValueError("non-finite point coordinates")
        cfg = self.config
        enc = np.zeros((points.shape[0], cfg.corner_feature_dim), dtype=cfg.dtype)
        rows_per_level = []
        weights_per_level = []
        for level in cfg.levels:
            store = self._levels[level]
            vrows = self._voxel_rows_for(points, level)
            edge = cfg.edge_length(level)
            t = points / edge - np.floor(points / edge)  # (N, 3) in [0, 1)
            # w_c = prod over axes of (t if corner bit else 1 - t)
            one_minus = 1.0 - t
            axis_w = np.where(CORNER_OFFSETS[None, :, :] == 1, t[:, None, :], one_minus[:, None, :])
            w = axis_w.prod(axis=2)  # (N, 8)
            crows = store.corner_rows_of_voxel.view[vrows]  # (N, 8)
            feats = store.corner_features.view[crows]       # (N, 8, m)
            enc += np.einsum("nc,ncm->nm", w.astype(cfg.dtype), feats)
            rows_per_level.append(crows.astype(np.int32))
            weights_per_level.append(w.astype(cfg.dtype))
        record = InterpolationRecord(levels=cfg.levels, rows=rows_per_level, weights=weights_per_level)
        return enc, record

    def encode_point(self, p) -> tuple[np.ndarray, InterpolationRecord]:
        enc, record = self.encode_points(np.asarray(p, dtype=np.float64)[None, :])
        return enc[0], record

    def coarse_f_rows(self, points) -> np.ndarray:
        """Row into `f_vectors` of the coarse voxel containing each point.

        Points sharing a coarse voxel get the identical row (the handle).
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return self._voxel_rows_for(points, self.config.coarse_level).astype(np.int32)

    def coarse_f_vector(self, p) -> int:
        """Handle (row index) of the F vector owning point p."""
        return int(self.coarse_f_rows(np.asarray(p, dtype=np.float64)[None, :])[0])

    # -- parameter views ------------------------------------------------------

    @property
    def f_vectors(self) -> np.ndarray:
        return self._f.view

    def corner_features(self, level: int) -> np.ndarray:
        return self._levels[level].corner_features.view

    def corner_counts(self) -> list[int]:
        return [self._levels[lvl].corner_features.count for lvl in self.config.levels]

    def voxel_count(self, level: int) -> int:
        return len(self._levels[level].voxel_keys)

    def corner_count(self, level: int) -> int:
        return self._levels[level].corner_features.count

    def parameter_blocks(self) -> dict[str, np.ndarray]:
        """Live views of all learnable arrays, keyed for the optimizer."""
        blocks = {f"corners{lvl}": self.corner_features(lvl) for lvl in self.config.levels}
        blocks["f_vectors"] = self.f_vectors
        return blocks

    # -- introspection --------------------------------------------------------

    def stats_text(self) -> str:
        lines = []
        for lvl in self.config.levels:
            store = self._levels[lvl]
            line = (
                f"level={lvl} edge={self.config.edge_length(lvl):.6g} "
                f"voxels={len(store.voxel_keys)} corners={store.corner_features.count}"
            )
            if lvl == self.config.coarse_level:
                line += f" f_vectors={self._f.count}"
            lines.append(line)
        lines.append(f"skipped_nonfinite={self.skipped_nonfinite}")
        return "\n".join(lines) + "\n"

    def clone(self) -> "SparseFeatureOctree":
        import copy as _copy

        dup = object.__new__(SparseFeatureOctree)
        dup.config = self.config
        dup._rng = _copy.deepcopy(self._rng)
        dup.skipped_nonfinite = self.skipped_nonfinite
        dup._levels = {}
        for lvl, store in self._levels.items():
            ns = _LevelStore(self.config.corner_feature_dim, self.config.dtype)
            ns.voxel_rows = dict(store.voxel_rows)
            ns.voxel_keys = list(store.voxel_keys)
            ns.corner_rows = dict(store.corner_rows)
            ns.corner_keys = list(store.corner_keys)
            ns.corner_rows_of_voxel.append(store.corner_rows_of_voxel.view.copy())
            if store.corner_features.count:
                ns.corner_features.append(store.corner_features.view.copy())
            dup._levels[lvl] = ns
        dup._f = _Rows(self.config.f_vector_dim, self.config.dtype)
        if self._f.count:
            dup._f.append(self._f.view.copy())
        return dup

    # -- serialization hooks (payload built by langmap.io) --------------------

    def level_state(self, level: int) -> dict:
        store = self._levels[level]
        return {
            "voxel_keys": _unpack(np.asarray(store.voxel_keys, dtype=np.int64)).astype(np.int32)
            if store.voxel_keys
            else np.empty((0, 3), np.int32),
            "corner_rows_of_voxel": store.corner_rows_of_voxel.view.copy(),
            "corner_keys": _unpack(np.asarray(store.corner_keys, dtype=np.int64)).astype(np.int32)
            if store.corner_keys
            else np.empty((0, 3), np.int32),
            "corner_features": store.corner_features.view.copy(),
        }

    def load_level_state(self, level: int, state: dict) -> None:
        store = _LevelStore(self.config.corner_feature_dim, self.config.dtype)
        vkeys = _pack(state["voxel_keys"].astype(np.int64)) if state["voxel_keys"].size else np.empty(0, np.int64)
        store.voxel_keys = vkeys.tolist()
        store.voxel_rows = {k: i for i, k in enumerate(store.voxel_keys)}
        if state["corner_rows_of_voxel"].size:
            store.corner_rows_of_voxel.append(state["corner_rows_of_voxel"].astype(np.int32))
        ckeys = _pack(state["corner_keys"].astype(np.int64)) if state["corner_keys"].size else np.empty(0, np.int64)
        store.corner_keys = ckeys.tolist()
        store.corner_rows = {k: i for i, k in enumerate(store.corner_keys)}
        if state["corner_features"].size:
            store.corner_features.append(state["corner_features"].astype(self.config.dtype))
        self._levels[level] = store

    def set_f_vectors(self, values: np.ndarray) -> None:
        self._f = _Rows(self.config.f_vector_dim, self.config.dtype)
        if values.size:
            self._f.append(values.astype(self.config.dtype))
