"""Empirical sample and total statistics of pre-activations, and ensemble aggregation.

All variances use the population (divide-by-T) convention, under which the
estimator identity  mhat_sq + vhat_sq = pooled_sq  holds exactly.
"""
import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence, Tuple

import numpy as np

from varprop import rng
from varprop.errors import (
    ConfigurationError,
    ConsistencyError,
    DegeneracyError,
    DimensionError,
    InsufficientBatchError,
)
from varprop.gradients import GradientTrace
from varprop.network import ForwardRecord

logger = logging.getLogger(__name__)

# vhat_sq at or below this fraction of pooled_sq counts as zero sample variance.
DEGENERACY_TOLERANCE = 1e-24
IDENTITY_TOLERANCE = 1e-10


@dataclass(frozen=True)
class LayerStatsRecord:
    """Per-layer statistics of one network; index l describes layer l + 1."""

    widths: Tuple[int, ...]
    mhat_sq: np.ndarray
    vhat_sq: np.ndarray
    pooled_sq: np.ndarray
    r: np.ndarray
    degenerate: np.ndarray
    source: str = "normalized"

    @property
    def depth(self) -> int:
        return len(self.r)


@dataclass(frozen=True)
class EnsembleSummary:
    """Per-layer moments of r over an ensemble of networks of equal shape."""

    r_mean: np.ndarray
    r_std: np.ndarray
    valid_count: np.ndarray
    mhat_sq_mean: np.ndarray
    vhat_sq_mean: np.ndarray
    pooled_sq_mean: np.ndarray
    network_count: int
    widths: Tuple[int, ...]

    @property
    def depth(self) -> int:
        return len(self.widths) - 1

    @property
    def r_stderr(self) -> np.ndarray:
        return self.r_std / np.sqrt(np.maximum(self.valid_count, 1))


@dataclass(frozen=True)
class TraceSummary:
    g2_mean: np.ndarray
    g2_std: np.ndarray
    network_count: int


class MomentShift(NamedTuple):
    mean_shift: float
    second_moment_shift: float


class RatioPreservation(NamedTuple):
    lhs: float
    rhs: float
    stderr: float


def _layer_moments(u: np.ndarray) -> Tuple[float, float, float]:
    mean = u.mean(axis=0)
    centered = u - mean
    mhat_sq = float(np.mean(mean * mean))
    vhat_sq = float(np.mean(centered * centered))
    pooled_sq = float(np.mean(u * u))
    return mhat_sq, vhat_sq, pooled_sq


def layer_stats(record: ForwardRecord, raw: bool = False) -> LayerStatsRecord:
    """Sample-mean, sample-variance and pooled statistics for every layer.

    With batch normalization the statistics describe the normalized
    pre-activations unless ``raw`` is set.
    """
    if record.samples < 2:
        raise InsufficientBatchError(f"sample statistics need T >= 2, got {record.samples}")
    matrices = record.pre if raw else record.normalized

    moments = np.array([_layer_moments(u) for u in matrices])
    mhat_sq, vhat_sq, pooled_sq = moments[:, 0], moments[:, 1], moments[:, 2]
    if not np.allclose(mhat_sq + vhat_sq, pooled_sq, rtol=IDENTITY_TOLERANCE, atol=1e-300):
        raise ConsistencyError("sample mean and variance do not add up to the pooled second moment")

    degenerate = (pooled_sq == 0.0) | (vhat_sq <= DEGENERACY_TOLERANCE * pooled_sq)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(degenerate, np.inf, np.sqrt(mhat_sq / np.where(degenerate, 1.0, vhat_sq)))
    if degenerate.any():
        logger.debug(f"Degenerate sample variance at layers {list(np.flatnonzero(degenerate) + 1)}")

    return LayerStatsRecord(
        widths=record.spec.widths,
        mhat_sq=mhat_sq,
        vhat_sq=vhat_sq,
        pooled_sq=pooled_sq,
        r=r,
        degenerate=degenerate,
        source="raw" if raw else "normalized",
    )


def sign_persistence(record: ForwardRecord, raw: bool = False) -> np.ndarray:
    """Per layer, the fraction of features whose sign never changes across samples."""
    matrices = record.pre if raw else record.normalized
    fractions = []
    for u in matrices:
        always_on = np.all(u > 0.0, axis=0)
        always_off = np.all(u <= 0.0, axis=0)
        fractions.append(float(np.mean(always_on | always_off)))
    return np.array(fractions)


def max_abs_feature_mean(record: ForwardRecord, raw: bool = False) -> np.ndarray:
    """Per layer, the largest |per-feature sample mean|."""
    matrices = record.pre if raw else record.normalized
    return np.array([float(np.max(np.abs(u.mean(axis=0)))) for u in matrices])


def aggregate(records: Sequence[LayerStatsRecord]) -> EnsembleSummary:
    """Ensemble mean and population std of r per layer, skipping degenerate layers."""
    if len(records) < 2:
        raise ConsistencyError(f"aggregation needs at least two records, got {len(records)}")
    widths = records[0].widths
    for record in records[1:]:
        if record.widths != widths:
            raise ConsistencyError(
                f"cannot aggregate networks of widths {list(widths)} and {list(record.widths)}"
            )

    r = np.stack([rec.r for rec in records])
    valid = ~np.stack([rec.degenerate for rec in records])
    valid_count = valid.sum(axis=0)
    masked = np.where(valid, r, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r_mean = np.where(valid_count > 0, masked.sum(axis=0) / valid_count, np.nan)
        deviation = np.where(valid, r - r_mean, 0.0)
        r_std = np.where(
            valid_count > 0, np.sqrt((deviation * deviation).sum(axis=0) / valid_count), np.nan
        )

    return EnsembleSummary(
        r_mean=r_mean,
        r_std=r_std,
        valid_count=valid_count,
        mhat_sq_mean=np.mean([rec.mhat_sq for rec in records], axis=0),
        vhat_sq_mean=np.mean([rec.vhat_sq for rec in records], axis=0),
        pooled_sq_mean=np.mean([rec.pooled_sq for rec in records], axis=0),
        network_count=len(records),
        widths=widths,
    )


def aggregate_traces(traces: Sequence[GradientTrace]) -> TraceSummary:
    """Per-layer ensemble mean and population std of g2, in input order."""
    if not traces:
        raise ConsistencyError("no gradient traces to aggregate")
    depth = traces[0].depth
    if any(t.depth != depth for t in traces):
        raise ConsistencyError("gradient traces have different depths")
    g2 = np.stack([t.g2 for t in traces])
    return TraceSummary(g2_mean=g2.mean(axis=0), g2_std=g2.std(axis=0), network_count=len(traces))


def relu_moment_shift(samples: Sequence[float]) -> MomentShift:
    """Change of mean and second moment when ReLU is applied to the samples."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size == 0:
        raise DimensionError("need at least one sample")
    negative = np.minimum(x, 0.0)
    # relu(x) - x = -min(x, 0) and relu(x)^2 - x^2 = -min(x, 0)^2.
    return MomentShift(
        mean_shift=float(np.mean(-negative)),
        second_moment_shift=float(-np.mean(negative * negative)),
    )


def ratio_preservation_check(
    x_batch: np.ndarray,
    trials: int,
    seed: int = 0,
    out_features: Optional[int] = None,
    chunk: int = 64,
) -> RatioPreservation:
    """Compare the batch's mean-to-variance ratio with its average image under W ~ N(0, 1).

    ``lhs`` averages numerator and denominator separately over ``trials``
    random matrices; ``rhs`` is the same ratio for the batch itself.
    """
    x = np.asarray(x_batch, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"batch must be a T x n matrix, got shape {x.shape}")
    if x.shape[0] < 2:
        raise InsufficientBatchError(f"need at least 2 samples, got {x.shape[0]}")
    if trials < 1:
        raise ConfigurationError(f"trials must be positive, got {trials}")
    samples, features = x.shape
    out_features = out_features or features

    mean = x.mean(axis=0)
    centered = x - mean
    numerator = float(mean @ mean)
    denominator = float(np.sum(centered * centered)) / samples
    if denominator <= DEGENERACY_TOLERANCE * float(np.sum(x * x)) / samples:
        raise DegeneracyError("batch has zero sample variance")
    rhs = numerator / denominator

    gen = rng.generator(seed)
    # Column 0 is the sample mean, the rest are centered samples.
    stacked = np.concatenate([mean[:, None], centered.T], axis=1)
    num = np.empty(trials)
    den = np.empty(trials)
    done = 0
    while done < trials:
        k = min(chunk, trials - done)
        w = gen.standard_normal((k, out_features, features))
        image = w @ stacked
        num[done : done + k] = np.sum(image[:, :, 0] ** 2, axis=1)
        den[done : done + k] = np.sum(image[:, :, 1:] ** 2, axis=(1, 2)) / samples
        done += k

    lhs = float(num.mean() / den.mean())
    if trials > 1:
        residual = num - lhs * den
        stderr = float(np.std(residual, ddof=1) / math.sqrt(trials) / den.mean())
    else:
        stderr = math.inf
    return RatioPreservation(lhs=lhs, rhs=rhs, stderr=stderr)
