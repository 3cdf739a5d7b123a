"""Measurement update: blend incoming embeddings with the map's current belief.

Per fine voxel, a fusion record tracks how often the voxel has been observed
and caches the last training target produced. Three modes: pass measurements
through untouched, recursive running mean, or exponential smoothing with a
similarity-driven rate.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .neural import NORM_EPS


class FusionMode(enum.Enum):
    NONE = "none"
    RECURSIVE_MEAN = "mean"
    EXP_SMOOTH = "exp"

    @classmethod
    def parse(cls, text: str) -> "FusionMode":
        for mode in cls:
            if mode.value == text:
                return mode
        raise ValueError(f"unknown fusion mode {text!r}; expected one of "
                         f"{[m.value for m in cls]}")


def alpha(c, invert: bool = False):
    """Smoothing rate from measurement/map cosine: c / (0.5 + c), clamped.

    Total on [-1, 1]: non-positive cosines give 0 (the raw formula is negative
    or singular there), so the range is [0, 2/3]. `invert` maps a -> 1 - a.
    """
    c = np.asarray(c, dtype=np.float64)
    a = np.where(c > 0, c / (0.5 + c), 0.0)
    a = np.clip(a, 0.0, 1.0)
    if invert:
        a = 1.0 - a
    if a.ndim == 0:
        return float(a)
    return a


@dataclass
class FusionConfig:
    mode: FusionMode = FusionMode.EXP_SMOOTH
    fine_resolution: float = 0.05
    invert_alpha: bool = False


class FusionGrid:
    """Per-fine-voxel fusion state and target production."""

    def __init__(self, config: FusionConfig, feature_dim: int, dtype: type = np.float32):
        self.config = config
        self.feature_dim = feature_dim
        self.dtype = np.dtype(dtype)
        self._rows: dict[tuple[int, int, int], int] = {}
        self._counts = np.zeros(0, dtype=np.int64)
        self._last = np.zeros((0, feature_dim), dtype=self.dtype)
        self.dropped_nonfinite = 0

    def __len__(self) -> int:
        return len(self._rows)

    def voxel_key(self, p) -> tuple[int, int, int]:
        q = np.floor(np.asarray(p, dtype=np.float64) / self.config.fine_resolution)
        return tuple(int(v) for v in q)

    def count(self, key) -> int:
        row = self._rows.get(tuple(key))
        return int(self._counts[row]) if row is not None else 0

    def last_target(self, key) -> np.ndarray | None:
        row = self._rows.get(tuple(key))
        return self._last[row].copy() if row is not None else None

    def _rows_for(self, keys: np.ndarray) -> np.ndarray:
        """Row per key, creating records (count 0) for unseen keys."""
        out = np.empty(keys.shape[0], dtype=np.int64)
        fresh = 0
        for i, key in enumerate(map(tuple, keys.tolist())):
            row = self._rows.get(key)
            if row is None:
                row = len(self._rows)
                self._rows[key] = row
                fresh += 1
            out[i] = row
        if fresh:
            self._counts = np.concatenate([self._counts, np.zeros(fresh, np.int64)])
            self._last = np.vstack([self._last, np.zeros((fresh, self.feature_dim), self.dtype)])
        return out

    @staticmethod
    def _renormalize(targets: np.ndarray, fallback: np.ndarray) -> np.ndarray:
        norms = np.linalg.norm(targets, axis=1, keepdims=True)
        # Exact cancellation of a blend: trust the measurement.
        cancelled = norms[:, 0] < 1e-9
        targets = np.where(cancelled[:, None], fallback, targets / np.maximum(norms, 1e-9))
        return targets.astype(fallback.dtype)

    def fuse_target(self, key, phi_n: np.ndarray, phi_prev: np.ndarray | None) -> np.ndarray:
        """Training target for one observation of one voxel.

        phi_n is the unit-norm measurement; phi_prev is the map's current
        reconstruction at the point (None or ~zero when the map has no
        opinion). Stateful modes create the record on first use (n = 1) and
        increment it afterwards. Non-finite inputs are dropped (counted) and
        leave the record untouched.
        """
        phi_n = np.asarray(phi_n, dtype=self.dtype)
        if not np.all(np.isfinite(phi_n)) or (
            phi_prev is not None and not np.all(np.isfinite(phi_prev))
        ):
            self.dropped_nonfinite += 1
            raise ValueError("non-finite fusion input; measurement dropped")
        mode = self.config.mode
        if mode is FusionMode.NONE:
            return phi_n.copy()

        row = int(self._rows_for(np.asarray(tuple(key), np.int64)[None, :])[0])
        record_absent = self._counts[row] == 0
        self._counts[row] += 1
        n = int(self._counts[row])
        prev = None if phi_prev is None else np.asarray(phi_prev, dtype=self.dtype)
        no_prior = prev is None or float(np.linalg.norm(prev)) < NORM_EPS

        if mode is FusionMode.RECURSIVE_MEAN:
            prev_eff = np.zeros_like(phi_n) if no_prior else prev
            target = ((n - 1) / n) * prev_eff + phi_n / n
        else:  # EXP_SMOOTH
            if record_absent or no_prior:
                target = phi_n.copy()
            else:
                c = float(np.dot(phi_n, prev) /
                          max(float(np.linalg.norm(phi_n)) * float(np.linalg.norm(prev)), NORM_EPS))
                a = alpha(c, invert=self.config.invert_alpha)
                target = a * prev + (1.0 - a) * phi_n
        target = self._renormalize(target[None, :], phi_n[None, :])[0]
        self._last[row] = target
        return target

    def batch_fuse(self, points: np.ndarray, features: np.ndarray,
                   map_query) -> tuple[np.ndarray, np.ndarray]:
        """Targets aligned with the frame's points, plus a validity mask.

        map_query(points) -> (phi (N, D), available (N,)) must evaluate the
        map with pre-update parameters. The map's opinion is what previous
        frames stored: voxels first observed in this call count as having no
        prior for every point of the call. Points with no reconstruction fall
        back to their own measurement; rows with non-finite inputs are masked
        out (False) and leave records untouched.
        """
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        features = np.atleast_2d(np.asarray(features))
        n_pts = points.shape[0]
        targets = np.zeros((n_pts, self.feature_dim), dtype=self.dtype)
        ok = np.all(np.isfinite(features), axis=1) & np.all(np.isfinite(points), axis=1)
        self.dropped_nonfinite += int((~ok).sum())

        meas = features.astype(self.dtype)
        if self.config.mode is FusionMode.NONE:
            targets[ok] = meas[ok]
            return targets, ok
        if not np.any(ok):
            return targets, ok

        idx = np.flatnonzero(ok)
        pts = points[idx]
        meas = meas[idx]
        phi_prev, available = map_query(pts)
        phi_prev = np.atleast_2d(np.asarray(phi_prev, dtype=self.dtype))
        available = np.asarray(available, dtype=bool)

        keys = np.floor(pts / self.config.fine_resolution).astype(np.int64)
        rows = self._rows_for(keys)
        pre_counts = self._counts[rows].copy()

        # Occurrence index of each point within its voxel, in frame order.
        order = np.argsort(rows, kind="stable")
        sorted_rows = rows[order]
        boundary = np.ones(len(order), dtype=bool)
        boundary[1:] = sorted_rows[1:] != sorted_rows[:-1]
        group_start = np.maximum.accumulate(np.where(boundary, np.arange(len(order)), 0))
        occ_sorted = np.arange(len(order)) - group_start
        occurrence = np.empty_like(occ_sorted)
        occurrence[order] = occ_sorted

        prev_norm = np.linalg.norm(phi_prev, axis=1)
        no_prior = (~available) | (pre_counts == 0) | (prev_norm < NORM_EPS)
        prev_eff = np.where(no_prior[:, None], 0.0, phi_prev).astype(self.dtype)

        if self.config.mode is FusionMode.RECURSIVE_MEAN:
            n_used = (pre_counts + occurrence + 1).astype(np.float64)[:, None]
            blended = ((n_used - 1.0) / n_used) * prev_eff + meas / n_used
        else:  # EXP_SMOOTH
            dots = np.einsum("nd,nd->n", meas.astype(np.float64), prev_eff.astype(np.float64))
            denom = np.maximum(np.linalg.norm(meas, axis=1) * np.linalg.norm(prev_eff, axis=1), NORM_EPS)
            a = alpha(dots / denom, invert=self.config.invert_alpha)[:, None]
            blended = np.where(no_prior[:, None], meas, a * prev_eff + (1.0 - a) * meas)

        fused = self._renormalize(blended, meas)
        targets[idx] = fused

        counts_inc = np.bincount(rows, minlength=len(self._counts))
        self._counts += counts_inc
        # Cache the frame's final target per touched voxel.
        last_of_group = order[np.flatnonzero(np.concatenate([boundary[1:], [True]]))]
        self._last[rows[last_of_group]] = fused[last_of_group]
        return targets, ok

    # -- serialization hooks ---------------------------------------------------

    def state(self) -> dict:
        keys = np.array(list(self._rows.keys()), dtype=np.int32).reshape(-1, 3)
        order = np.argsort(np.array(list(self._rows.values()), dtype=np.int64))
        return {
            "keys": keys[order],
            "counts": self._counts.copy(),
            "last": self._last.copy(),
        }

    def load_state(self, state: dict) -> None:
        self._rows = {tuple(int(v) for v in k): i for i, k in enumerate(state["keys"])}
        self._counts = state["counts"].astype(np.int64)
        self._last = state["last"].astype(self.dtype)

    def clone(self) -> "FusionGrid":
        dup = FusionGrid(self.config, self.feature_dim, self.dtype)
        dup._rows = dict(self._rows)
        dup._counts = self._counts.copy()
        dup._last = self._last.copy()
        dup.dropped_nonfinite = self.dropped_nonfinite
        return dup
