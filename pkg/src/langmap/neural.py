"""Language decoder MLP with hand-derived gradients, cosine losses, and Adam.

The decoder is a fixed three-layer architecture: two rectified layers expand a
low-dimensional point encoding into an element-wise gate for a high-dimensional
vector F, and a final linear layer maps the gated F to the output embedding.
Gradients are derived by hand for exactly this architecture; there is no
general autodiff graph.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

# Norms below this are treated as zero vectors in cosine arithmetic.
NORM_EPS = 1e-12


@dataclass
class DecoderConfig:
    input_dim: int = 16
    hidden_dim: int = 64
    f_dim: int = 512
    output_dim: int = 512
    dtype: type = np.float32

    def __post_init__(self):
        if min(self.input_dim, self.hidden_dim, self.f_dim, self.output_dim) <= 0:
            raise ValueError("all decoder dimensions must be positive")


@dataclass
class DecoderCache:
    """Everything the backward pass needs, retained by forward."""

    enc: np.ndarray  # (N, m)
    z1: np.ndarray   # (N, h) pre-activation
    h1: np.ndarray   # (N, h)
    z2: np.ndarray   # (N, L) pre-activation
    s: np.ndarray    # (N, L) gate
    f: np.ndarray    # (N, L)


@dataclass
class DecoderGrads:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray
    enc: np.ndarray
    f: np.ndarray

    def param_dict(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2,
                "w3": self.w3, "b3": self.b3}


class LanguageDecoder:
    """phi = (s * F) @ W3 + b3 with s = relu(relu(e @ W1 + b1) @ W2 + b2).

    Weights are stored input-major: W1 (m, h), W2 (h, L), W3 (L, D).
    Parameters must stay finite at all times; `check_finite` is asserted by
    callers after every optimizer step.
    """

    PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")

    def __init__(self, config: DecoderConfig, rng: np.random.Generator):
        self.config = config
        dt = np.dtype(config.dtype)

        def init_layer(fan_in, fan_out):
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dt)
            b = rng.uniform(-bound, bound, size=fan_out).astype(dt)
            return w, b

        self.w1, self.b1 = init_layer(config.input_dim, config.hidden_dim)
        self.w2, self.b2 = init_layer(config.hidden_dim, config.f_dim)
        self.w3, self.b3 = init_layer(config.f_dim, config.output_dim)

    # -- parameter access -------------------------------------------------

    def params(self) -> dict[str, np.ndarray]:
        """Live references; in-place mutation updates the decoder."""
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        for name in self.PARAM_NAMES:
            current = getattr(self, name)
            if values[name].shape != current.shape:
                raise ValueError(f"shape mismatch for {name}")
            setattr(self, name, values[name].astype(current.dtype, copy=True))

    def copy(self) -> "LanguageDecoder":
        dup = object.__new__(LanguageDecoder)
        dup.config = self.config
        for name in self.PARAM_NAMES:
            setattr(dup, name, getattr(self, name).copy())
        return dup

    def check_finite(self) -> None:
        for name in self.PARAM_NAMES:
            if not np.all(np.isfinite(getattr(self, name))):
                raise FloatingPointError(f"decoder parameter {name} is non-finite")

    # -- forward / backward ------------------------------------------------

    def forward(self, enc: np.ndarray, f: np.ndarray) -> tuple[np.ndarray, DecoderCache]:
        """Batched forward over aligned rows of encodings and F vectors.

        enc: (N, m), f: (N, L) or (1, L) broadcast over the batch.
        Returns (phi (N, D), cache).
        """
        enc = np.asarray(enc)
        f = np.asarray(f)
        cfg = self.config
        if enc.ndim != 2 or enc.shape[1] != cfg.input_dim:
            raise ValueError(f"encoding shape {enc.shape} does not match input_dim {cfg.input_dim}")
        if f.ndim != 2 or f.shape[1] != cfg.f_dim:
            raise ValueError(f"F shape {f.shape} does not match f_dim {cfg.f_dim}")
        if f.shape[0] not in (1, enc.shape[0]):
            raise ValueError("F rows must match batch or broadcast from 1")
        z1 = enc @ self.w1
        z1 += self.b1
        h1 = np.maximum(z1, 0)
        z2 = h1 @ self.w2
        z2 += self.b2
        s = np.maximum(z2, 0)
        if f.shape[0] == 1 and enc.shape[0] != 1:
            f = np.broadcast_to(f, (enc.shape[0], cfg.f_dim))
        phi = (s * f) @ self.w3
        phi += self.b3
        return phi, DecoderCache(enc=enc, z1=z1, h1=h1, z2=z2, s=s, f=f)

    def backward(self, cache: DecoderCache, dphi: np.ndarray) -> DecoderGrads:
        """Exact reverse-mode gradients for all parameters and both inputs."""
        if dphi.shape != (cache.enc.shape[0], self.config.output_dim):
            raise ValueError("upstream gradient shape does not match cached forward")
        sf = cache.s * cache.f
        dw3 = sf.T @ dphi
        db3 = dphi.sum(axis=0)
        dsf = dphi @ self.w3.T
        df = dsf * cache.s
        ds = dsf * cache.f
        dz2 = ds * (cache.z2 > 0)
        dw2 = cache.h1.T @ dz2
        db2 = dz2.sum(axis=0)
        dh1 = dz2 @ self.w2.T
        dz1 = dh1 * (cache.z1 > 0)
        dw1 = cache.enc.T @ dz1
        db1 = dz1.sum(axis=0)
        denc = dz1 @ self.w1.T
        return DecoderGrads(w1=dw1, b1=db1, w2=dw2, b2=db2, w3=dw3, b3=db3,
                            enc=denc, f=df)

    def backward_inputs(self, cache: DecoderCache, dphi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Gradients w.r.t. (enc, F) only; skips the weight gradients.

        Used by the mapping loop, where decoder weights are frozen.
        """
        dsf = dphi @ self.w3.T
        df = dsf * cache.s
        dsf *= cache.f
        dsf *= cache.z2 > 0       # dsf is now dz2
        dz1 = dsf @ self.w2.T
        dz1 *= cache.z1 > 0
        denc = dz1 @ self.w1.T
        return denc, df


# -- cosine losses ----------------------------------------------------------


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine of two vectors; defined as 0 when either norm is ~zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < NORM_EPS or nb < NORM_EPS:
        return 0.0
    return float(a @ b / (na * nb))


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine between two (N, D) arrays; zero-norm rows give 0."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = na * nb
    valid = denom > NORM_EPS
    out = np.zeros(a.shape[0], dtype=np.float64)
    out[valid] = np.einsum("nd,nd->n", a[valid], b[valid]) / denom[valid]
    return out


def vl_loss(targets: np.ndarray, predictions: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative cosine similarity and its exact gradient w.r.t. predictions.

    Rows where either vector has ~zero norm contribute cosine 0 and a zero
    gradient (the loss is locally constant in the measure-zero sense we adopt).
    """
    targets = np.asarray(targets)
    predictions = np.asarray(predictions)
    if predictions.ndim != 2 or targets.shape != predictions.shape:
        raise ValueError(f"shape mismatch: targets {targets.shape} vs predictions {predictions.shape}")
    n = predictions.shape[0]
    if n == 0:
        raise ValueError("vl_loss requires at least one row; callers must filter empty batches")
    tn = np.linalg.norm(targets, axis=1)
    pn = np.linalg.norm(predictions, axis=1)
    denom = tn * pn
    valid = denom > NORM_EPS
    dots = np.einsum("nd,nd->n", targets, predictions)
    inv_denom = np.zeros_like(denom)
    np.divide(1.0, denom, out=inv_denom, where=valid)
    cos = dots * inv_denom
    loss = -float(np.mean(cos, dtype=np.float64))

    # d(-cos)/dp = -(t / (|t||p|) - cos * p / |p|^2), averaged over the batch
    inv_pn2 = np.zeros_like(pn)
    np.divide(1.0, pn * pn, out=inv_pn2, where=valid)
    dpred = targets * inv_denom[:, None]
    dpred -= (cos * inv_pn2)[:, None] * predictions
    dpred *= -1.0 / n
    return loss, dpred.astype(predictions.dtype, copy=False)


# -- Adam -------------------------------------------------------------------


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class Adam:
    """Bias-corrected Adam over named parameter blocks, updated in place.

    Blocks whose gradient is non-finite are skipped for that step (parameters
    and moments untouched), counted in `skipped_blocks`, and logged. Moment
    arrays grow with their parameter block when rows are appended between
    steps; new rows start from zero moments.
    """

    config: AdamConfig = field(default_factory=AdamConfig)
    step_count: int = 0
    skipped_blocks: int = 0
    _m: dict = field(default_factory=dict)
    _v: dict = field(default_factory=dict)

    def _moments(self, name: str, shape: tuple, dtype) -> tuple[np.ndarray, np.ndarray]:
        m = self._m.get(name)
        if m is None:
            m = np.zeros(shape, dtype=dtype)
            v = np.zeros(shape, dtype=dtype)
        elif m.shape != shape:
            # Parameter block grew (rows appended); keep old moments, zero-init new.
            v = self._v[name]
            grown_m = np.zeros(shape, dtype=dtype)
            grown_v = np.zeros(shape, dtype=dtype)
            grown_m[: m.shape[0]] = m
            grown_v[: m.shape[0]] = v
            m, v = grown_m, grown_v
        else:
            v = self._v[name]
        self._m[name] = m
        self._v[name] = v
        return m, v

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        cfg = self.config
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - cfg.beta1 ** t
        bc2 = 1.0 - cfg.beta2 ** t
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
            if not np.all(np.isfinite(g)):
                self.skipped_blocks += 1
                logger.warning("non-finite gradient for block %r at step %d; block skipped", name, t)
                continue
            m, v = self._moments(name, p.shape, p.dtype)
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            p -= (cfg.lr / bc1) * m / (np.sqrt(v / bc2) + cfg.eps)
