"""End-to-end incremental mapping: frame ingestion, per-frame optimization,
and query/classification of the finished map.

Per frame, in order: (1) extend the decoder to any new embeddings, (2) grow
the octree under the frame's points, (3) produce fused training targets from
the pre-update map, (4) optimize octree corner features and F vectors against
those targets with the decoder frozen.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import adaptive
from .adaptive import AdaptiveReport, FeatureBank
from .fusion import FusionConfig, FusionGrid, FusionMode
from .geometry import InsertReport, OctreeConfig, SparseFeatureOctree
from .neural import Adam, AdamConfig, DecoderConfig, LanguageDecoder, vl_loss


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


@dataclass
class Frame:
    """Depth image (meters, 0 = invalid), per-pixel embeddings, camera pose.

    The pose maps camera to world: p_world = R @ p_cam + t. Right-handed,
    +z forward through the image plane, +y down the image.
    """

    depth: np.ndarray           # (H, W)
    features: np.ndarray        # (H, W, D); all-zero pixels carry no feature
    rotation: np.ndarray        # (3, 3)
    translation: np.ndarray     # (3,)

    def validate(self) -> None:
        if self.depth.ndim != 2 or self.features.shape[:2] != self.depth.shape:
            raise ValueError("depth and feature image shapes disagree")
        r = np.asarray(self.rotation, dtype=np.float64)
        if r.shape != (3, 3) or not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal within 1e-6")
        finite_depth = self.depth[np.isfinite(self.depth)]
        if finite_depth.size and finite_depth.min() < 0:
            raise ValueError("depth must be non-negative")


@dataclass
class LanguagePointCloud:
    points: np.ndarray    # (N, 3) world frame
    features: np.ndarray  # (N, D) unit vectors

    def __post_init__(self):
        if self.points.shape[0] != self.features.shape[0]:
            raise ValueError("points and features must align")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class MappingConfig:
    map_iters: int = 100
    batch_size: int = 4096
    fusion_mode: FusionMode = FusionMode.EXP_SMOOTH
    seed: int = 0
    lr: float = 1e-2
    tau: float = 0.02
    n_opt: int = 100
    shuffle_regularization: bool = True
    invert_alpha: bool = False
    f_warm_start: str = "mean"  # "mean" | "bank"

    def __post_init__(self):
        if self.map_iters < 1:
            raise ValueError("map_iters must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.f_warm_start not in ("mean", "bank"):
            raise ValueError("f_warm_start must be 'mean' or 'bank'")


@dataclass
class FrameReport:
    n_points: int = 0
    adaptive: AdaptiveReport | None = None
    insert: InsertReport | None = None
    loss_curve: list = field(default_factory=list)
    bank_size: int = 0
    seconds: dict = field(default_factory=dict)


def project_frame(frame: Frame, intrinsics: CameraIntrinsics) -> LanguagePointCloud:
    """Back-project valid pixels into a world-frame language point cloud.

    Valid pixels have finite positive depth and a non-zero feature vector.
    Features are normalized to unit length on ingest.
    """
    frame.validate()
    depth = np.asarray(frame.depth, dtype=np.float64)
    h, w = depth.shape
    if (h, w) != (intrinsics.height, intrinsics.width):
        raise ValueError("frame size does not match intrinsics")
    feats = frame.features.reshape(h * w, -1)
    d = depth.ravel()
    feat_norm = np.linalg.norm(feats, axis=1)
    valid = np.isfinite(d) & (d > 0) & (feat_norm > 0) & np.all(np.isfinite(feats), axis=1)
    if not np.any(valid):
        return LanguagePointCloud(points=np.empty((0, 3)), features=np.empty((0, feats.shape[1]), feats.dtype))
    vv, uu = np.divmod(np.flatnonzero(valid), w)
    dz = d[valid]
    x = (uu - intrinsics.cx) * dz / intrinsics.fx
    y = (vv - intrinsics.cy) * dz / intrinsics.fy
    cam = np.stack([x, y, dz], axis=1)
    world = cam @ np.asarray(frame.rotation, np.float64).T + np.asarray(frame.translation, np.float64)
    f = feats[valid] / feat_norm[valid][:, None]
    return LanguagePointCloud(points=world, features=f.astype(frame.features.dtype))


class MappingState:
    """Owns all mutable mapping state; one writer, sequential frames."""

    def __init__(self, octree_config: OctreeConfig, decoder_config: DecoderConfig,
                 mapping_config: MappingConfig):
        if octree_config.f_vector_dim != decoder_config.f_dim:
            raise ValueError("octree F dimension must match decoder f_dim")
        if octree_config.corner_feature_dim != decoder_config.input_dim:
            raise ValueError("octree corner dimension must match decoder input_dim")
        self.octree_config = octree_config
        self.decoder_config = decoder_config
        self.config = mapping_config

        seeds = np.random.SeedSequence(mapping_config.seed).spawn(4)
        self.octree = SparseFeatureOctree(octree_config, np.random.default_rng(seeds[0]))
        self.decoder = LanguageDecoder(decoder_config, np.random.default_rng(seeds[1]))
        self.rng_adaptive = np.random.default_rng(seeds[2])
        self.rng_sampler = np.random.default_rng(seeds[3])
        self.bank = FeatureBank(
            feature_dim=decoder_config.output_dim,
            encoding_dim=decoder_config.input_dim,
            f_dim=decoder_config.f_dim,
            tau=mapping_config.tau,
            n_opt=mapping_config.n_opt,
            dtype=decoder_config.dtype,
        )
        self.grid = FusionGrid(
            FusionConfig(
                mode=mapping_config.fusion_mode,
                fine_resolution=octree_config.fine_resolution,
                invert_alpha=mapping_config.invert_alpha,
            ),
            feature_dim=decoder_config.output_dim,
            dtype=decoder_config.dtype,
        )
        self.frame_count = 0

    # -- reconstruction -------------------------------------------------------

    def reconstruct(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Decode embeddings at arbitrary points; flags unmapped points."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        mapped = self.octree.contains(points)
        phi = np.zeros((points.shape[0], self.decoder_config.output_dim),
                       dtype=np.dtype(self.decoder_config.dtype))
        if np.any(mapped):
            sub = points[mapped]
            enc, _ = self.octree.encode_points(sub)
            f = self.octree.f_vectors[self.octree.coarse_f_rows(sub)]
            phi[mapped] = self.decoder.forward(enc, f)[0]
        return phi, mapped

    # -- per-frame update -------------------------------------------------------

    def map_frame(self, cloud: LanguagePointCloud) -> FrameReport:
        report = FrameReport(n_points=len(cloud), bank_size=len(self.bank))
        if len(cloud) == 0:
            return report
        cfg = self.config
        t0 = time.perf_counter()

        # 1. Extend decoder to new embeddings (raw frame features, not fused).
        report.adaptive = adaptive.optimize(
            self.bank, self.decoder, cloud.features, rng=self.rng_adaptive,
            adam=AdamConfig(lr=cfg.lr),
            shuffle_regularization=cfg.shuffle_regularization,
        )
        t1 = time.perf_counter()

        # 2. Grow the octree under the frame's points.
        report.insert = self.octree.insert_points(cloud.points, f_init=self.bank.mean_f())
        if cfg.f_warm_start == "bank" and report.insert.new_coarse_rows.size:
            self._warm_start_f(cloud, report.insert.new_coarse_rows)
        t2 = time.perf_counter()

        # 3. Fused training targets from the pre-update map.
        targets, ok = self.grid.batch_fuse(cloud.points, cloud.features, self.reconstruct)
        t3 = time.perf_counter()

        # 4. Optimize octree parameters against the targets; decoder frozen.
        report.loss_curve = self._optimize_octree(cloud.points[ok], targets[ok])
        report.bank_size = len(self.bank)
        t4 = time.perf_counter()

        report.seconds = {
            "adaptive": t1 - t0, "insert": t2 - t1, "fuse": t3 - t2, "mapping": t4 - t3,
            "total": t4 - t0,
        }
        self.frame_count += 1
        return report

    def _warm_start_f(self, cloud: LanguagePointCloud, new_rows: np.ndarray) -> None:
        """Overwrite fresh F vectors with the bank F of the voxel's first point."""
        rows = self.octree.coarse_f_rows(cloud.points)
        fresh = set(int(r) for r in new_rows)
        seen: set[int] = set()
        for i, row in enumerate(rows.tolist()):
            if row in fresh and row not in seen:
                seen.add(row)
                hit = adaptive.seed_encoding_for(self.bank, cloud.features[i])
                if hit is not None:
                    self.octree.f_vectors[row] = hit[1]
                if len(seen) == len(fresh):
                    break

    def _optimize_octree(self, points: np.ndarray, targets: np.ndarray) -> list:
        if points.shape[0] == 0:
            return []
        octree = self.octree
        cfg = self.config
        n = points.shape[0]
        _, record = octree.encode_points(points)
        interp_ops = record.operators(octree.corner_counts())
        f_rows = octree.coarse_f_rows(points)
        n_f = octree.f_vectors.shape[0]
        f_op = sp.csc_matrix(
            (np.ones(n, dtype=octree.f_vectors.dtype), (f_rows, np.arange(n, dtype=np.int64))),
            shape=(n_f, n),
        )
        blocks = octree.parameter_blocks()
        corner_names = [f"corners{lvl}" for lvl in octree.config.levels]
        optimizer = Adam(AdamConfig(lr=cfg.lr))

        batch_size = min(cfg.batch_size, n)
        perm = self.rng_sampler.permutation(n)
        cursor = 0
        losses = []
        for _ in range(cfg.map_iters):
            if cursor + batch_size > n:
                perm = self.rng_sampler.permutation(n)
                cursor = 0
            batch = np.sort(perm[cursor: cursor + batch_size])
            cursor += batch_size

            enc = None
            batch_ops = []
            for name, op in zip(corner_names, interp_ops):
                op_b = op[:, batch]
                batch_ops.append(op_b)
                part = op_b.T @ blocks[name]
                enc = part if enc is None else enc + part
            fb_rows = f_rows[batch]
            f_b = octree.f_vectors[fb_rows]
            phi, cache = self.decoder.forward(enc, f_b)
            loss, dphi = vl_loss(targets[batch], phi)
            if not np.isfinite(loss):
                raise FloatingPointError("non-finite mapping loss")
            losses.append(float(loss))
            d_enc, d_f = self.decoder.backward_inputs(cache, dphi)
            grads = {name: op_b @ d_enc for name, op_b in zip(corner_names, batch_ops)}
            grads["f_vectors"] = f_op[:, batch] @ d_f
            optimizer.step(blocks, grads)
        return losses

    # -- queries ---------------------------------------------------------------

    def query(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Reconstructed embeddings at arbitrary points + mapped flags."""
        return self.reconstruct(points)

    def classify(self, points: np.ndarray, label_embeddings: np.ndarray
                 ) -> tuple[np.ndarray, np.ndarray]:
        """Nearest label by cosine per point; unmapped points get label -1.

        Ties break to the lowest label index; results are invariant to
        positive rescaling of the reconstructed features.
        """
        labels = np.asarray(label_embeddings, dtype=np.float64)
        if labels.ndim != 2 or labels.shape[0] < 1:
            raise ValueError("need at least one label embedding")
        labels = labels / np.linalg.norm(labels, axis=1, keepdims=True)
        phi, mapped = self.reconstruct(points)
        n = phi.shape[0]
        ids = np.full(n, -1, dtype=np.int64)
        conf = np.zeros(n, dtype=np.float64)
        if np.any(mapped):
            sub = phi[mapped].astype(np.float64)
            norms = np.linalg.norm(sub, axis=1, keepdims=True)
            sub = np.divide(sub, norms, out=np.zeros_like(sub), where=norms > 0)
            sims = sub @ labels.T
            ids[mapped] = np.argmax(sims, axis=1)
            conf[mapped] = sims[np.arange(sims.shape[0]), ids[mapped]]
        return ids, conf
