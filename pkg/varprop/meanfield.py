"""Wide-network predictions: the ReLU correlation map and its consequences.

The correlation map is

    K(c) = 2 E[f(z1) f(c z1 + sqrt(1 - c^2) z2)],   z1, z2 ~ N(0, 1) iid,

with f the ReLU. It is evaluated as a two-dimensional integral over the
standard normal measure written in polar coordinates: the radial axis uses
Gauss-Laguerre nodes in t = r^2 / 2 (so the Gaussian weight is exact) and the
angular axis uses Gauss-Legendre nodes on the arc where both ReLU factors can
be nonzero. The integrand is smooth on that arc, so the rule converges to
machine precision long before the default 64 nodes per axis.
"""
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import special

from varprop import rng
from varprop.errors import ConfigurationError, DivergenceError, DomainError

logger = logging.getLogger(__name__)

MIN_NODE_COUNT = 16
# |c| is clamped to this inside the integral so sqrt(1 - c^2) never vanishes.
CLAMP = 1.0 - 1e-12
# Total pre-activation variance for unit-variance inputs under Kaiming init.
SIGMA_SQ = 2.0


class QuadratureConfig(BaseModel):
    """Quadrature resolution and domain tolerance for the correlation map."""

    model_config = ConfigDict(frozen=True)

    node_count: int = Field(64, gt=0)
    clamp_tolerance: float = Field(1e-9, ge=0.0, le=1e-6)


DEFAULT_QUADRATURE = QuadratureConfig()


@dataclass(frozen=True)
class MeanFieldTrajectory:
    """Per-layer wide-network statistics; entry l describes layer l + 1."""

    depth: int
    c: np.ndarray
    m_sq: np.ndarray
    v_sq: np.ndarray
    sigma_sq: float = SIGMA_SQ

    @property
    def m(self) -> np.ndarray:
        return np.sqrt(self.m_sq)

    @property
    def v(self) -> np.ndarray:
        return np.sqrt(self.v_sq)

    @property
    def sigma(self) -> float:
        return math.sqrt(self.sigma_sq)


class BatchNormPrediction(NamedTuple):
    sigma_s: float
    slope: float

    @property
    def amplification(self) -> float:
        """Per-layer gradient gain, 1 / sigma_s."""
        return 1.0 / self.sigma_s


@lru_cache(maxsize=32)
def _nodes(node_count: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    t, t_weights = special.roots_laguerre(node_count)
    x, x_weights = special.roots_legendre(node_count)
    return t, t_weights, x, x_weights


def _check_quadrature(q: QuadratureConfig) -> None:
    if q.node_count < MIN_NODE_COUNT:
        raise ConfigurationError(
            f"node_count must be at least {MIN_NODE_COUNT}, got {q.node_count}"
        )


def _check_correlation(c: float, q: QuadratureConfig) -> float:
    if not math.isfinite(c) or abs(c) > 1.0 + q.clamp_tolerance:
        raise DomainError(f"correlation {c!r} is outside [-1, 1]")
    return min(max(c, -CLAMP), CLAMP)


def k_map(c: float, q: QuadratureConfig = DEFAULT_QUADRATURE) -> float:
    """Correlation of two samples' activations one layer deeper."""
    _check_quadrature(q)
    c = _check_correlation(float(c), q)
    s = math.sqrt(1.0 - c * c)
    phi = math.atan2(s, c)

    t, t_weights, x, x_weights = _nodes(q.node_count)
    # f(z1) > 0 needs cos(theta) > 0 and the second factor is r cos(theta - phi).
    lo, hi = phi - math.pi / 2.0, math.pi / 2.0
    theta = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
    theta_weights = 0.5 * (hi - lo) * x_weights

    r = np.sqrt(2.0 * t)[:, None]
    z1 = r * np.cos(theta)[None, :]
    z2 = r * np.sin(theta)[None, :]
    integrand = np.maximum(z1, 0.0) * np.maximum(c * z1 + s * z2, 0.0)

    # (1 / 2pi) exp(-r^2 / 2) r dr dtheta == (1 / 2pi) exp(-t) dt dtheta
    expectation = float(t_weights @ integrand @ theta_weights) / (2.0 * math.pi)
    return min(max(2.0 * expectation, 0.0), 1.0)


def iterate_k(c0: float, depth: int, q: QuadratureConfig = DEFAULT_QUADRATURE) -> np.ndarray:
    """Return [c0, K(c0), K(K(c0)), ...] with depth + 1 entries."""
    if depth < 1:
        raise ConfigurationError(f"depth must be positive, got {depth}")
    _check_correlation(float(c0), q)
    values = np.empty(depth + 1)
    values[0] = c0
    for layer in range(depth):
        values[layer + 1] = k_map(values[layer], q)
    return values


def trajectory(depth: int, q: QuadratureConfig = DEFAULT_QUADRATURE) -> MeanFieldTrajectory:
    """Sample-mean and sample-variance trajectory for IID unit-variance inputs."""
    c = iterate_k(0.0, depth, q)
    m_sq = SIGMA_SQ * c[1:]
    v_sq = SIGMA_SQ * (1.0 - c[1:])
    logger.debug(f"Trajectory depth={depth}: v_sq[-1]={v_sq[-1]:.6g}")
    return MeanFieldTrajectory(depth=depth, c=c, m_sq=m_sq, v_sq=v_sq)


def k_derivative(c: float, q: QuadratureConfig = DEFAULT_QUADRATURE) -> float:
    """dK/dc by finite differences, strictly inside (-1, 1)."""
    c = float(c)
    if not math.isfinite(c) or abs(c) >= 1.0:
        raise DomainError(f"derivative needs |c| < 1, got {c!r}")
    h = max(1e-6, 1e-6 * (1.0 - abs(c)))
    if c + h >= 1.0:
        return (3.0 * k_map(c, q) - 4.0 * k_map(c - h, q) + k_map(c - 2.0 * h, q)) / (2.0 * h)
    if c - h <= -1.0:
        return (-3.0 * k_map(c, q) + 4.0 * k_map(c + h, q) - k_map(c + 2.0 * h, q)) / (2.0 * h)
    return (k_map(c + h, q) - k_map(c - h, q)) / (2.0 * h)


def theoretical_ratio(traj: MeanFieldTrajectory, l: int) -> float:
    """Wide-network sample mean-to-std ratio m / v at entry l."""
    if not 0 <= l < traj.depth:
        raise ConfigurationError(f"layer index {l} outside [0, {traj.depth})")
    if traj.v_sq[l] <= 0.0:
        raise DivergenceError(f"sample variance vanished at layer index {l}")
    return math.sqrt(traj.m_sq[l] / traj.v_sq[l])


def bn_predictions(q: QuadratureConfig = DEFAULT_QUADRATURE) -> BatchNormPrediction:
    """Batch-norm rescaling factor sigma_s and the predicted log-gradient slope."""
    residual = 1.0 - k_map(0.0, q)
    return BatchNormPrediction(sigma_s=math.sqrt(residual), slope=math.log(residual))


def arccos_kernel(c: float) -> float:
    """Closed-form ReLU correlation map, kept as a secondary oracle for k_map."""
    c = min(max(float(c), -1.0), 1.0)
    phi = math.acos(c)
    return (math.sin(phi) + (math.pi - phi) * c) / math.pi


def k_map_monte_carlo(
    c: float,
    draws: int = 10_000_000,
    seed: int = 0,
    chunk: int = 1_000_000,
) -> Tuple[float, float]:
    """Plain Monte Carlo estimate of K(c) and its standard error.

    Independent of the quadrature; used to validate it.
    """
    c = float(c)
    if not math.isfinite(c) or abs(c) > 1.0:
        raise DomainError(f"correlation {c!r} is outside [-1, 1]")
    if draws < 2:
        raise ConfigurationError(f"need at least two draws, got {draws}")
    s = math.sqrt(max(1.0 - c * c, 0.0))
    gen = rng.oracle_generator(seed)

    total = 0.0
    total_sq = 0.0
    remaining = draws
    while remaining > 0:
        n = min(chunk, remaining)
        z = gen.standard_normal((2, n))
        values = 2.0 * np.maximum(z[0], 0.0) * np.maximum(c * z[0] + s * z[1], 0.0)
        total += float(values.sum())
        total_sq += float(np.square(values).sum())
        remaining -= n

    mean = total / draws
    variance = max(total_sq / draws - mean * mean, 0.0) * draws / (draws - 1)
    return mean, math.sqrt(variance / draws)
