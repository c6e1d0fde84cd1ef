"""Evaluation metrics: pairwise feature cosine similarity, Fréchet distance
between Gaussian feature fits, and the noise-prediction-difference pipeline.

A fixed random conv net stands in for learned image encoders, so absolute
values are only meaningful relative to each other within one experiment; the
extractor seed is recorded to keep runs comparable.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import diffusion as D
from . import kernels
from .errors import DimensionError

EIG_CLAMP = -1e-8  # eigenvalues below this indicate a genuinely non-PSD product


class FeatureExtractor:
    """Frozen three-stage conv net: conv3x3 + SiLU + 2x2 mean pool, then a
    global average into a fixed-width feature vector."""

    def __init__(self, seed: int = 0, channels=(3, 16, 32, 64)):
        rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0xFEA7]))
        self.seed = seed
        self.dim = channels[-1]
        self.weights = []
        for c_in, c_out in zip(channels, channels[1:]):
            w = rng.normal(0.0, 1.0 / np.sqrt(9 * c_in), (c_out, c_in, 3, 3))
            b = np.zeros(c_out)
            self.weights.append((w, b))

    def features(self, img: np.ndarray) -> np.ndarray:
        h = np.ascontiguousarray(img, dtype=np.float64)
        for w, b in self.weights:
            h = kernels.conv3x3_forward(h, w, b)
            h = h / (1.0 + np.exp(-np.clip(h, -500, 500)))  # silu
            c, hh, ww = h.shape
            h = h.reshape(c, hh // 2, 2, ww // 2, 2).mean(axis=(2, 4))
        return h.mean(axis=(1, 2))

    def batch_features(self, images) -> np.ndarray:
        return np.stack([self.features(img) for img in images])


def clip_similarity(gen_images, ref_images, extractor: FeatureExtractor) -> float:
    """Mean cosine similarity over all (generated, reference) pairs."""
    if not len(gen_images) or not len(ref_images):
        raise ValueError("both image sets must be nonempty")
    a = extractor.batch_features(gen_images)
    b = extractor.batch_features(ref_images)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise ValueError("degenerate zero-norm feature encountered")
    sims = (a / na[:, None]) @ (b / nb[:, None]).T
    return float(sims.mean())


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    @staticmethod
    def from_features(feats: np.ndarray) -> "GaussianStats":
        n, dim = feats.shape
        if n < dim:
            warnings.warn(
                f"covariance estimated from {n} samples in {dim} dims is ill-conditioned",
                stacklevel=2,
            )
        mean = feats.mean(axis=0)
        cov = np.cov(feats, rowvar=False, ddof=1) if n > 1 else np.zeros((dim, dim))
        return GaussianStats(mean, np.atleast_2d(cov), n)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    if vals.min() < EIG_CLAMP:
        raise ValueError(f"matrix is not PSD within tolerance (min eigenvalue {vals.min():.3e})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}); the cross term is
    evaluated through the symmetrized product S_a^{1/2} S_b S_a^{1/2}."""
    if a.mean.shape != b.mean.shape:
        raise DimensionError(f"stats dims differ: {a.mean.shape} vs {b.mean.shape}")
    root_a = _psd_sqrt(a.cov)
    inner = root_a @ b.cov @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    if vals.min() < EIG_CLAMP:
        raise ValueError(f"cross term is not PSD within tolerance (min eigenvalue {vals.min():.3e})")
    trace_cross = np.sqrt(np.clip(vals, 0.0, None)).sum()
    d2 = float(((a.mean - b.mean) ** 2).sum() + np.trace(a.cov) + np.trace(b.cov) - 2.0 * trace_cross)
    return max(d2, 0.0)


def frechet_from_images(gen_images, ref_images, extractor: FeatureExtractor) -> float:
    return frechet_distance(
        GaussianStats.from_features(extractor.batch_features(gen_images)),
        GaussianStats.from_features(extractor.batch_features(ref_images)),
    )


# --- noise-prediction difference -----------------------------------------------


def noise_diff_map(
    model, bank, image: np.ndarray, t: int, cond_a: np.ndarray, cond_b: np.ndarray,
    seed: int, schedule: D.NoiseSchedule,
) -> np.ndarray:
    """Per-pixel L2 (over channels) of the eps-prediction difference between
    two prompt encodings on the same noised image."""
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0xD1FF]))
    x_t = D.q_sample(image, t, rng.standard_normal(image.shape), schedule)
    from . import tensor as T

    with T.no_grad():
        eps_a = model.forward(x_t, t, cond_a, bank=bank).data
        eps_b = model.forward(x_t, t, cond_b, bank=bank).data
    return np.sqrt(((eps_a - eps_b) ** 2).sum(axis=0))


def diff_score(
    model, bank, images, cond_a, cond_b, schedule,
    t_set=(250, 500, 750), seeds=(0, 1, 2, 3), max_images: int = 32,
) -> float:
    """Mean of noise_diff_map means over images x timesteps x noise seeds."""
    if not len(t_set) or not len(seeds):
        raise ValueError("t_set and seeds must be nonempty")
    vals = []
    for image in images[:max_images]:
        for t in t_set:
            for seed in seeds:
                vals.append(
                    noise_diff_map(model, bank, image, t, cond_a, cond_b, seed, schedule).mean()
                )
    return float(np.mean(vals))
