"""Sequence quality metrics: consistency, smoothness and Frechet fidelity.

Perceptual distances and feature extractors are small callables with a
``name`` attribute, so heavier backends can be swapped in without touching
the metric code.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np

from .errors import ConfigError, DomainError
from .model import DenoiserWeights, encoder_features


class PerceptualDistance(Protocol):
    name: str

    def __call__(self, a: np.ndarray, b: np.ndarray) -> float: ...


class FeatureExtractor(Protocol):
    name: str
    dim: int

    def __call__(self, img: np.ndarray) -> np.ndarray: ...


class PixelL2:
    """Root-mean-square pixel difference."""

    name = "pixel"

    def __call__(self, a, b):
        d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
        return float(np.sqrt(np.mean(d * d)))


class EncoderFeatures:
    name = "encoder"

    def __init__(self, weights: DenoiserWeights):
        self.weights = weights
        self.dim = weights.config.d

    def __call__(self, img):
        return encoder_features(np.asarray(img, dtype=np.float64), self.weights)


class EncoderL2:
    """RMS difference between mean-pooled encoder features."""

    name = "encoder"

    def __init__(self, weights: DenoiserWeights):
        self.features = EncoderFeatures(weights)

    def __call__(self, a, b):
        d = self.features(a) - self.features(b)
        return float(np.sqrt(np.mean(d * d)))


class DownsampleFeatures:
    """4x4 average pooling of a 16x16 image, flattened to 16 values."""

    name = "downsample"
    dim = 16

    def __call__(self, img):
        img = np.asarray(img, dtype=np.float64)
        return img.reshape(4, 4, 4, 4).mean(axis=(1, 3)).ravel()


def _images(seq) -> list:
    return list(getattr(seq, "images", seq))


def adjacent_distances(seq, p: PerceptualDistance) -> np.ndarray:
    imgs = _images(seq)
    if len(imgs) < 2:
        raise ConfigError("a sequence needs at least two images")
    return np.array([p(imgs[i], imgs[i + 1]) for i in range(len(imgs) - 1)])


def consistency(seq, p: PerceptualDistance) -> float:
    return float(np.mean(adjacent_distances(seq, p)))


def gini(x) -> float:
    """Gini coefficient over ordered pairs; 0 for an all-zero set."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise DomainError("gini of an empty set")
    if np.any(x < 0) or not np.all(np.isfinite(x)):
        raise DomainError("gini needs finite nonnegative values")
    mean = x.mean()
    if mean == 0.0:
        return 0.0
    n = x.size
    # sum over ordered pairs |xi - xj| = 2 * sum_k k (n - k) (x_(k+1) - x_(k));
    # sorted gaps are nonnegative, so the result cannot round below zero
    gaps = np.diff(np.sort(x))
    k = np.arange(1, n)
    pair_sum = 2.0 * np.sum(k * (n - k) * gaps)
    return float(pair_sum / (2.0 * n * n * mean))


def smoothness(seq, p: PerceptualDistance) -> float:
    return 1.0 - gini(adjacent_distances(seq, p))


def _sqrt_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(mu_a, cov_a, mu_b, cov_b) -> float:
    """Frechet distance between two Gaussians given their moments."""
    mu_a = np.atleast_1d(np.asarray(mu_a, dtype=np.float64))
    mu_b = np.atleast_1d(np.asarray(mu_b, dtype=np.float64))
    cov_a = np.atleast_2d(np.asarray(cov_a, dtype=np.float64))
    cov_b = np.atleast_2d(np.asarray(cov_b, dtype=np.float64))
    root_a = _sqrt_psd(cov_a)
    cross = _sqrt_psd(root_a @ cov_b @ root_a)
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(value, 0.0)


COV_REGULARIZER = 1e-6


def feature_moments(features: np.ndarray):
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] < 2:
        raise ConfigError("at least two samples are needed for a covariance")
    if not np.all(np.isfinite(features)):
        raise DomainError("non-finite features")
    mu = features.mean(axis=0)
    cov = np.atleast_2d(np.cov(features, rowvar=False, ddof=1))
    return mu, cov + COV_REGULARIZER * np.eye(cov.shape[0])


def frechet_fidelity(sequences: Sequence, fx: FeatureExtractor) -> float:
    """Frechet distance between source-image and interior-image features."""
    if not sequences:
        raise ConfigError("no sequences given")
    sources, interiors = [], []
    for seq in sequences:
        imgs = _images(seq)
        if len(imgs) < 3:
            raise ConfigError("fidelity needs sequences with interior images (m >= 3)")
        sources += [imgs[0], imgs[-1]]
        interiors += imgs[1:-1]
    fa = np.stack([fx(i) for i in sources])
    fb = np.stack([fx(i) for i in interiors])
    return frechet_distance(*feature_moments(fa), *feature_moments(fb))


@dataclass
class MetricsReport:
    consistency: float
    smoothness: float
    fidelity: Optional[float] = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.smoothness <= 1.0:
            raise DomainError(f"smoothness {self.smoothness} outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    CSV_FIELDS = ("consistency", "smoothness", "fidelity", "distance", "features", "k", "m")

    def csv_row(self) -> dict:
        row = {"consistency": self.consistency, "smoothness": self.smoothness,
               "fidelity": "" if self.fidelity is None else self.fidelity}
        for key in ("distance", "features", "k", "m"):
            row[key] = self.metadata.get(key, "")
        return row

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=self.CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerow(self.csv_row())
        return buf.getvalue()


def evaluate(seqs: Sequence, p: PerceptualDistance, fx: Optional[FeatureExtractor] = None) -> MetricsReport:
    """Mean consistency/smoothness over ``seqs`` and one pooled fidelity.

    Fidelity is reported only for two or more sequences that all have
    interior images, and only when a feature extractor is supplied.
    """
    seqs = list(seqs)
    if not seqs:
        raise ConfigError("no sequences to evaluate")
    cons = float(np.mean([consistency(s, p) for s in seqs]))
    smooth = float(np.mean([smoothness(s, p) for s in seqs]))
    lengths = {len(_images(s)) for s in seqs}
    fid = None
    if fx is not None and len(seqs) >= 2 and min(lengths) >= 3:
        fid = frechet_fidelity(seqs, fx)
    meta = {
        "distance": p.name,
        "features": getattr(fx, "name", None),
        "k": len(seqs),
        "m": lengths.pop() if len(lengths) == 1 else sorted(lengths),
    }
    return MetricsReport(cons, smooth, fid, meta)
