"""Feature bank and adaptive decoder extension for newly observed embeddings.

When a frame contains embeddings the decoder has never represented, a short
optimization fits fresh learnable inputs (one encoding and one F vector per
new embedding) together with the decoder weights, while replaying every known
bank entry as a frozen target so nothing already learned degrades. Frames
without new embeddings return immediately and mutate nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .neural import Adam, AdamConfig, LanguageDecoder, cosine_rows, vl_loss

# Initialization scales for new learnable inputs. Encodings carry the
# discriminative signal and start at O(1); F slots start near zero so early
# outputs stay dominated by the decoder bias until optimization shapes them.
ENCODING_INIT_SCALE = 0.5
F_INIT_SCALE = 1e-2


class DivergenceError(FloatingPointError):
    """Optimization produced a non-finite loss; decoder was rolled back."""


class FeatureBank:
    """Known unique embeddings with their learned (encoding, F) pairs.

    The three aligned arrays only grow; admitted entries are never removed or
    re-optimized. `tau` is a cosine-distance tolerance: two embeddings are the
    same feature iff 1 - cos < tau.
    """

    def __init__(self, feature_dim: int, encoding_dim: int, f_dim: int,
                 tau: float = 0.02, n_opt: int = 100, dtype: type = np.float32):
        if not 0 < tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if n_opt < 1:
            raise ValueError("n_opt must be at least 1")
        self.tau = float(tau)
        self.n_opt = int(n_opt)
        self.feature_dim = feature_dim
        self.encoding_dim = encoding_dim
        self.f_dim = f_dim
        self.dtype = np.dtype(dtype)
        self.features = np.empty((0, feature_dim), dtype=self.dtype)
        self.encodings = np.empty((0, encoding_dim), dtype=self.dtype)
        self.f_vectors = np.empty((0, f_dim), dtype=self.dtype)

    def __len__(self) -> int:
        return self.features.shape[0]

    def extend(self, features: np.ndarray, encodings: np.ndarray, f_vectors: np.ndarray) -> None:
        if not (features.shape[0] == encodings.shape[0] == f_vectors.shape[0]):
            raise ValueError("bank arrays must stay aligned")
        self.features = np.vstack([self.features, features.astype(self.dtype)])
        self.encodings = np.vstack([self.encodings, encodings.astype(self.dtype)])
        self.f_vectors = np.vstack([self.f_vectors, f_vectors.astype(self.dtype)])

    def mean_f(self) -> np.ndarray | None:
        """Mean of stored F vectors; None while the bank is empty."""
        if len(self) == 0:
            return None
        return self.f_vectors.mean(axis=0).astype(self.dtype)

    def clone(self) -> "FeatureBank":
        dup = FeatureBank(self.feature_dim, self.encoding_dim, self.f_dim,
                          tau=self.tau, n_opt=self.n_opt, dtype=self.dtype)
        dup.features = self.features.copy()
        dup.encodings = self.encodings.copy()
        dup.f_vectors = self.f_vectors.copy()
        return dup


def unique(features: np.ndarray, tau: float) -> np.ndarray:
    """Greedy first-seen deduplication at cosine distance tau.

    A row is admitted iff its distance (1 - cos) to every previously admitted
    row is >= tau. Inputs are assumed unit-norm.
    """
    feats = np.atleast_2d(np.asarray(features))
    if feats.shape[0] == 0:
        return feats.copy()
    if tau > 0:
        # Exact duplicates can never survive against their first occurrence;
        # collapsing them first keeps the greedy loop short.
        _, first = np.unique(feats, axis=0, return_index=True)
        feats = feats[np.sort(first)]
    out = np.empty_like(feats)
    kept = 0
    limit = 1.0 - tau
    for row in feats:
        if kept == 0 or float(np.max(out[:kept] @ row)) <= limit:
            out[kept] = row
            kept += 1
    return out[:kept].copy()


def unknown(features: np.ndarray, bank_features: np.ndarray, tau: float) -> np.ndarray:
    """Rows whose cosine distance to every bank entry is >= tau."""
    feats = np.atleast_2d(np.asarray(features))
    if feats.shape[0] == 0 or bank_features.shape[0] == 0:
        return feats.copy()
    sims = feats.astype(np.float64) @ bank_features.astype(np.float64).T
    keep = sims.max(axis=1) <= 1.0 - tau
    return feats[keep].copy()


def seed_encoding_for(bank: FeatureBank, feature: np.ndarray) -> tuple[np.ndarray, np.ndarray] | None:
    """(encoding, F) of the nearest bank entry within tau, else None.

    Ties break to the lowest index.
    """
    if len(bank) == 0:
        return None
    sims = bank.features.astype(np.float64) @ np.asarray(feature, dtype=np.float64)
    best = int(np.argmax(sims))
    if 1.0 - sims[best] < bank.tau:
        return bank.encodings[best].copy(), bank.f_vectors[best].copy()
    return None


@dataclass
class AdaptiveReport:
    n_input: int = 0
    n_unique: int = 0
    n_new: int = 0
    iterations: int = 0
    loss_curve: list = field(default_factory=list)
    fit: np.ndarray = field(default_factory=lambda: np.empty(0))  # cosine per bank entry


def optimize(bank: FeatureBank, decoder: LanguageDecoder, features: np.ndarray,
             rng: np.random.Generator, adam: AdamConfig | None = None,
             shuffle_regularization: bool = True) -> AdaptiveReport:
    """Extend decoder and bank to represent the frame's new embeddings.

    Runs bank.n_opt iterations over all (known + new) pairs; the optimizer
    updates only the new encodings, the new F slots, and the decoder. Known
    entries enter the loss as replay targets but receive no updates. Returns
    without touching any state (RNG included) when nothing is new.
    """
    report = AdaptiveReport(n_input=np.atleast_2d(features).shape[0])
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if feats.shape[0] == 0:
        return report
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    feats = feats[norms[:, 0] > 0] / norms[norms[:, 0] > 0]

    uniq = unique(feats, bank.tau)
    report.n_unique = uniq.shape[0]
    new = unknown(uniq, bank.features, bank.tau)
    report.n_new = new.shape[0]
    if new.shape[0] == 0:
        return report

    dt = bank.dtype
    k = new.shape[0]
    n_known = len(bank)
    enc_new = rng.uniform(-ENCODING_INIT_SCALE, ENCODING_INIT_SCALE,
                          size=(k, bank.encoding_dim)).astype(dt)
    mean_f = bank.mean_f()
    if mean_f is None:
        f_seed = rng.uniform(-F_INIT_SCALE, F_INIT_SCALE, size=(1, bank.f_dim)).astype(dt)
    else:
        f_seed = mean_f[None, :]
    # One shared initial F vector; each new feature owns an independent copy.
    f_new = np.repeat(f_seed, k, axis=0)

    snapshot = decoder.copy()
    optimizer = Adam(adam or AdamConfig())
    targets = np.vstack([bank.features, new.astype(dt)])
    params = {"enc_new": enc_new, "f_new": f_new, **decoder.params()}

    try:
        for _ in range(bank.n_opt):
            all_enc = np.vstack([bank.encodings, enc_new])
            all_f = np.vstack([bank.f_vectors, f_new])
            phi, cache = decoder.forward(all_enc, all_f)
            loss, dphi = vl_loss(targets, phi)
            grads = decoder.backward(cache, dphi)
            d_enc_new = grads.enc[n_known:]
            d_f_new = grads.f[n_known:]
            if shuffle_regularization:
                perm = rng.permutation(all_f.shape[0])
                loss_f, d_all_f = vl_loss(all_f[perm], all_f)
                loss = loss + loss_f
                d_f_new = d_f_new + d_all_f[n_known:]
            if not np.isfinite(loss):
                raise DivergenceError(f"non-finite loss after {len(report.loss_curve)} iterations")
            report.loss_curve.append(float(loss))
            grad_dict = {"enc_new": d_enc_new, "f_new": d_f_new, **grads.param_dict()}
            optimizer.step(params, grad_dict)
            decoder.check_finite()
            report.iterations += 1
    except FloatingPointError as err:
        decoder.set_params(snapshot.params())
        raise DivergenceError(str(err)) from err

    bank.extend(new.astype(dt), enc_new, f_new)
    phi, _ = decoder.forward(bank.encodings, bank.f_vectors)
    report.fit = cosine_rows(bank.features, phi)
    return report
