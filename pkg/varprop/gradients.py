"""Reverse-mode propagation of activation gradients under a random linear loss."""
import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from scipy import stats as scipy_stats

from varprop import rng
from varprop.errors import ConfigurationError, DegenerateTraceError, DimensionError
from varprop.network import DenseNet, ForwardRecord, NetworkSpec, check_record

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GradientTrace:
    """g2[l] = mean over samples and features of (dL/dx^l)^2, for l = 0..L."""

    g2: np.ndarray
    spec: NetworkSpec
    w_seed: int
    frozen_stats: bool = False

    @property
    def depth(self) -> int:
        return len(self.g2) - 1


def _loss_vector(width: int, w_seed: int) -> np.ndarray:
    return rng.loss_generator(w_seed).standard_normal(width)


def random_linear_loss(xL: np.ndarray, w_seed: int) -> float:
    """L = sum over samples of w . x^L_t with w ~ N(0, I) drawn from ``w_seed``."""
    xL = np.asarray(xL, dtype=np.float64)
    if xL.ndim != 2:
        raise DimensionError(f"output activations must be T x n, got shape {xL.shape}")
    return float(np.sum(xL @ _loss_vector(xL.shape[1], w_seed)))


def random_linear_loss_grad(xL: np.ndarray, w_seed: int) -> np.ndarray:
    """dL/dx^L: the loss vector w repeated for every sample row."""
    xL = np.asarray(xL)
    if xL.ndim != 2:
        raise DimensionError(f"output activations must be T x n, got shape {xL.shape}")
    w = _loss_vector(xL.shape[1], w_seed)
    return np.tile(w, (xL.shape[0], 1))


def _batchnorm_backward(
    grad_hat: np.ndarray,
    u_hat: np.ndarray,
    std: np.ndarray,
    epsilon: float,
    frozen_stats: bool,
) -> np.ndarray:
    denom = np.sqrt(std * std + epsilon)
    if frozen_stats:
        return grad_hat / denom
    # Includes the dependence of the batch mean and variance on every sample.
    mean_grad = grad_hat.mean(axis=0)
    mean_grad_hat = np.mean(grad_hat * u_hat, axis=0)
    return (grad_hat - mean_grad - u_hat * mean_grad_hat) / denom


def backpropagate(
    net: DenseNet,
    record: ForwardRecord,
    out_grad: np.ndarray,
    frozen_stats: bool = False,
) -> List[np.ndarray]:
    """Gradient matrices dL/dx^l for l = 0..L (index l is layer l)."""
    check_record(net, record)
    out_grad = np.asarray(out_grad, dtype=np.float64)
    expected = record.activations[-1].shape
    if out_grad.shape != expected:
        raise DimensionError(f"output gradient has shape {out_grad.shape}, expected {expected}")

    spec = net.spec
    grads: List[Optional[np.ndarray]] = [None] * (net.depth + 1)
    grads[net.depth] = out_grad
    grad = out_grad
    for index in reversed(range(net.depth)):
        u_hat = record.normalized[index]
        # ReLU subgradient at exactly zero is zero.
        grad = grad * (u_hat > 0.0)
        if spec.batchnorm:
            grad = _batchnorm_backward(
                grad, u_hat, record.batch_std[index], spec.bn_epsilon, frozen_stats
            )
        grad = grad @ net.weights[index]
        grads[index] = grad
    return grads


def backward(
    net: DenseNet,
    record: ForwardRecord,
    out_grad: np.ndarray,
    w_seed: int = 0,
    frozen_stats: bool = False,
) -> GradientTrace:
    """Per-layer mean squared activation gradient."""
    grads = backpropagate(net, record, out_grad, frozen_stats)
    g2 = np.array([float(np.mean(g * g)) for g in grads])
    return GradientTrace(g2=g2, spec=net.spec, w_seed=w_seed, frozen_stats=frozen_stats)


def default_fit_range(depth: int) -> tuple:
    """Layers 1..L-1 when there are interior layers, else 0..L."""
    return (1, depth - 1) if depth >= 3 else (0, depth)


def gradient_fit(trace: GradientTrace, l_min: Optional[int] = None, l_max: Optional[int] = None):
    """Least-squares fit of log g2[l] against l; returns scipy's LinregressResult."""
    default_min, default_max = default_fit_range(trace.depth)
    l_min = default_min if l_min is None else l_min
    l_max = default_max if l_max is None else l_max
    if not 0 <= l_min < l_max <= trace.depth:
        raise ConfigurationError(
            f"fit range [{l_min}, {l_max}] must satisfy 0 <= l_min < l_max <= {trace.depth}"
        )
    layers = np.arange(l_min, l_max + 1)
    values = trace.g2[l_min : l_max + 1]
    if np.any(values <= 0.0):
        zero = int(layers[np.argmax(values <= 0.0)])
        raise DegenerateTraceError(f"gradient vanished at layer {zero}")
    return scipy_stats.linregress(layers, np.log(values))


def gradient_slope(trace: GradientTrace, l_min: Optional[int] = None, l_max: Optional[int] = None) -> float:
    """Slope of log g2 vs. layer over [l_min, l_max]."""
    return float(gradient_fit(trace, l_min, l_max).slope)
