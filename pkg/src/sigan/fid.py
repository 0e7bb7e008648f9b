"""Frechet distance between feature distributions of two image sets.

Given features of real and generated sets, fit a Gaussian to each
(mean mu, unbiased covariance phi) and compute

    d^2 = |mu_x - mu_g|^2 + tr(phi_x + phi_g - 2 (phi_x phi_g)^(1/2))

The matrix square root is evaluated through an eigendecomposition of the
symmetrized product B phi_x B with B = phi_g^(1/2), whose eigenvalues are
the squares of the singular values in the cross term; this keeps everything
in real symmetric arithmetic. Lower is better; 0 iff the Gaussians match.
"""

import logging
from dataclasses import dataclass

import numpy as np

from sigan.errors import ConfigError, ExtractorError, ShapeMismatchError, SiganError

logger = logging.getLogger(__name__)

# Eigenvalues of nominally-PSD matrices may come out slightly negative in
# floating point; beyond this the computation is declared unreliable.
NEGATIVE_EIGENVALUE_TOLERANCE = 1e-6
NEGATIVE_SCORE_TOLERANCE = 1e-6


@dataclass
class FeatureStats:
    """Gaussian summary of one feature set: mean, covariance, sample count."""

    mu: np.ndarray  # (D,)
    phi: np.ndarray  # (D, D), symmetric PSD
    n: int

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.phi = np.asarray(self.phi, dtype=np.float64)
        if self.mu.ndim != 1:
            raise ConfigError(f"mu must be 1-D, got shape {self.mu.shape}")
        d = self.mu.shape[0]
        if self.phi.shape != (d, d):
            raise ShapeMismatchError((d, d), self.phi.shape, "covariance")
        if self.n < 2:
            raise ConfigError(f"need at least 2 samples for a covariance estimate, got {self.n}")
        if not np.allclose(self.phi, self.phi.T, atol=1e-8):
            raise ConfigError("covariance matrix is not symmetric")


@dataclass
class FidReport:
    """Distance plus the context needed to compare reports."""

    score: float
    n_real: int
    n_fake: int
    feature_dim: int
    extractor_id: str

    def to_dict(self) -> dict:
        return {
            "fid": self.score,
            "n_real": self.n_real,
            "n_fake": self.n_fake,
            "feature_dim": self.feature_dim,
            "extractor_id": self.extractor_id,
        }


def compute_stats(features: np.ndarray) -> FeatureStats:
    """Mean and unbiased (n-1) covariance of an N x D feature matrix."""
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim != 2:
        raise ConfigError(f"features must be N x D, got shape {arr.shape}")
    n = arr.shape[0]
    if n < 2:
        raise ConfigError(f"need at least 2 feature rows, got {n}")
    if not np.isfinite(arr).all():
        raise ValueError("non-finite feature values")
    mu = arr.mean(axis=0)
    centered = arr - mu
    phi = centered.T @ centered / (n - 1)
    phi = (phi + phi.T) / 2.0
    return FeatureStats(mu=mu, phi=phi, n=n)


def _psd_sqrt(phi: np.ndarray, what: str) -> np.ndarray:
    evals, evecs = np.linalg.eigh(phi)
    if evals.min() < -NEGATIVE_EIGENVALUE_TOLERANCE:
        raise SiganError(
            f"{what} has eigenvalues as low as {evals.min():.3e}; "
            "the covariance is numerically indefinite (ill-conditioned features?)"
        )
    clamped = np.clip(evals, 0.0, None)
    return (evecs * np.sqrt(clamped)) @ evecs.T


def fid_from_stats(stats_real: FeatureStats, stats_fake: FeatureStats) -> float:
    """Distance between two fitted Gaussians; symmetric in its arguments."""
    if stats_real.mu.shape != stats_fake.mu.shape:
        raise ShapeMismatchError(stats_real.mu.shape, stats_fake.mu.shape, "feature dimension")
    mean_term = float(np.sum((stats_real.mu - stats_fake.mu) ** 2))
    sqrt_fake = _psd_sqrt(stats_fake.phi, "generated-set covariance")
    inner = sqrt_fake @ stats_real.phi @ sqrt_fake
    inner = (inner + inner.T) / 2.0
    evals = np.linalg.eigvalsh(inner)
    if evals.min() < -NEGATIVE_EIGENVALUE_TOLERANCE:
        raise SiganError(
            f"cross-term eigenvalues as low as {evals.min():.3e}; "
            "matrix square root is numerically unreliable here"
        )
    cross = 2.0 * float(np.sqrt(np.clip(evals, 0.0, None)).sum())
    trace_term = float(np.trace(stats_real.phi) + np.trace(stats_fake.phi)) - cross
    score = mean_term + trace_term
    if score < 0:
        if score < -NEGATIVE_SCORE_TOLERANCE:
            raise SiganError(f"distance came out at {score:.3e}; computation is numerically unreliable")
        logger.warning("clamping tiny negative distance %.3e to 0", score)
        score = 0.0
    return float(score)


def extract_features(images, extractor, batch_size: int = 32) -> np.ndarray:
    """Run an extractor over image samples (or raw H x W arrays) in batches."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    pixel_arrays = [np.asarray(getattr(img, "pixels", img), dtype=np.float32) for img in images]
    if not pixel_arrays:
        raise ConfigError("no images to extract features from")
    shapes = {a.shape for a in pixel_arrays}
    if len(shapes) > 1:
        raise ShapeMismatchError(pixel_arrays[0].shape, sorted(shapes)[-1], "image batch")
    chunks = []
    dim = None
    for start in range(0, len(pixel_arrays), batch_size):
        batch = np.stack(pixel_arrays[start : start + batch_size])
        feats = np.asarray(extractor(batch))
        if feats.ndim != 2 or feats.shape[0] != batch.shape[0]:
            raise ExtractorError(
                f"extractor returned shape {feats.shape} for a batch of {batch.shape[0]} images"
            )
        if dim is None:
            dim = feats.shape[1]
        elif feats.shape[1] != dim:
            raise ExtractorError(f"feature dimension drifted between batches: {dim} then {feats.shape[1]}")
        chunks.append(feats)
    return np.concatenate(chunks, axis=0)


def fid(features_real: np.ndarray, features_fake: np.ndarray, extractor_id: str = "unspecified") -> FidReport:
    """Fit Gaussians to both feature sets and report their distance.

    Estimates from small sets are biased (the covariance is noisy well below
    a few thousand samples), so sample counts travel with the score and a
    caveat is logged on every call.
    """
    stats_real = compute_stats(features_real)
    stats_fake = compute_stats(features_fake)
    score = fid_from_stats(stats_real, stats_fake)
    logger.info(
        "distance %.4f from n_real=%d, n_fake=%d (small-sample estimates are biased; "
        "compare only at matching sample counts)",
        score,
        stats_real.n,
        stats_fake.n,
    )
    return FidReport(
        score=score,
        n_real=stats_real.n,
        n_fake=stats_fake.n,
        feature_dim=int(stats_real.mu.shape[0]),
        extractor_id=extractor_id,
    )
