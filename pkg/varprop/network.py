"""Finite-width ReLU MLPs: construction, initialization and forward propagation."""
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from varprop import rng
from varprop.errors import (
    ConfigurationError,
    ConsistencyError,
    DimensionError,
    InsufficientBatchError,
)

logger = logging.getLogger(__name__)

# Calibration floor added to the pooled second moment by the data-dependent initializers.
INIT_EPSILON = 1e-5


class InitScheme(str, Enum):
    KAIMING = "kaiming"
    SCALE = "scale"
    SCALE_BIAS = "scale_bias"


class NetworkSpec(BaseModel):
    """Architecture, initialization recipe and seed of one random MLP."""

    model_config = ConfigDict(frozen=True)

    widths: Tuple[int, ...]
    init_scheme: InitScheme = InitScheme.KAIMING
    batchnorm: bool = False
    seed: int = Field(0, ge=0, le=2**64 - 1)
    bn_epsilon: float = Field(1e-5, gt=0.0)
    weight_gain: float = Field(1.0, gt=0.0)

    @field_validator("widths")
    @classmethod
    def _check_widths(cls, widths: Tuple[int, ...]) -> Tuple[int, ...]:
        if len(widths) < 2:
            raise ValueError("need at least an input width and one layer width")
        if any(w < 1 for w in widths):
            raise ValueError(f"all widths must be positive, got {list(widths)}")
        return widths

    @classmethod
    def uniform(cls, width: int, depth: int, **kwargs) -> "NetworkSpec":
        """Spec with input width and all layer widths equal to ``width``."""
        return cls(widths=(width,) * (depth + 1), **kwargs)

    @property
    def depth(self) -> int:
        return len(self.widths) - 1


@dataclass(frozen=True)
class DenseNet:
    """Concrete weights W^l (n^l x n^{l-1}) and biases b^l for layers 1..L."""

    spec: NetworkSpec
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.weights) != self.spec.depth or len(self.biases) != self.spec.depth:
            raise DimensionError(
                f"expected {self.spec.depth} layers, got {len(self.weights)} weights "
                f"and {len(self.biases)} biases"
            )
        for layer, (w, b) in enumerate(zip(self.weights, self.biases), start=1):
            shape = (self.spec.widths[layer], self.spec.widths[layer - 1])
            if w.shape != shape or b.shape != (shape[0],):
                raise DimensionError(
                    f"layer {layer}: expected weight {shape} and bias ({shape[0]},), "
                    f"got {w.shape} and {b.shape}"
                )
            w.flags.writeable = False
            b.flags.writeable = False

    @classmethod
    def from_arrays(
        cls,
        spec: NetworkSpec,
        weights: Sequence[np.ndarray],
        biases: Optional[Sequence[np.ndarray]] = None,
    ) -> "DenseNet":
        """Wrap explicit parameters; missing biases are zero."""
        weights = tuple(np.array(w, dtype=np.float64) for w in weights)
        if biases is None:
            biases = tuple(np.zeros(w.shape[0]) for w in weights)
        else:
            biases = tuple(np.array(b, dtype=np.float64) for b in biases)
        return cls(spec=spec, weights=weights, biases=biases)

    @property
    def depth(self) -> int:
        return self.spec.depth


@dataclass(frozen=True)
class SampleBatch:
    """T samples of dimension n^0, samples by features."""

    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise DimensionError(f"batch must be a T x n matrix, got shape {data.shape}")
        if data.shape[0] < 1:
            raise InsufficientBatchError("batch has no samples")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def size(self) -> int:
        return self.data.shape[0]

    @property
    def features(self) -> int:
        return self.data.shape[1]


BatchLike = Union[SampleBatch, np.ndarray]


@dataclass(frozen=True)
class ForwardRecord:
    """Every intermediate matrix of one forward pass.

    ``pre[l-1]`` is U^l, ``normalized[l-1]`` is the post-BN pre-activation
    (U^l itself without BN) and ``activations[l]`` is X^l, with X^0 the input.
    """

    spec: NetworkSpec
    activations: Tuple[np.ndarray, ...]
    pre: Tuple[np.ndarray, ...]
    normalized: Tuple[np.ndarray, ...]
    batch_mean: Optional[Tuple[np.ndarray, ...]] = None
    batch_std: Optional[Tuple[np.ndarray, ...]] = None

    @property
    def depth(self) -> int:
        return len(self.pre)

    @property
    def samples(self) -> int:
        return self.activations[0].shape[0]


def _as_batch(batch: BatchLike) -> SampleBatch:
    return batch if isinstance(batch, SampleBatch) else SampleBatch(batch)


def _relu(u: np.ndarray) -> np.ndarray:
    return np.maximum(u, 0.0)


def _batch_normalize(u: np.ndarray, epsilon: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    mean = u.mean(axis=0)
    centered = u - mean
    std = np.sqrt(np.mean(centered * centered, axis=0))
    return centered / np.sqrt(std * std + epsilon), mean, std


def _draw_weights(spec: NetworkSpec, variance_of) -> Tuple[np.ndarray, ...]:
    weights = []
    for layer in range(1, spec.depth + 1):
        fan_in = spec.widths[layer - 1]
        std = math.sqrt(variance_of(fan_in))
        gen = rng.layer_generator(spec.seed, layer)
        w = gen.standard_normal((spec.widths[layer], fan_in))
        w *= std
        weights.append(w)
    return tuple(weights)


def _zero_biases(spec: NetworkSpec) -> Tuple[np.ndarray, ...]:
    return tuple(np.zeros(n) for n in spec.widths[1:])


def kaiming_init(spec: NetworkSpec) -> DenseNet:
    """W ~ N(0, gain * 2 / fan_in), b = 0."""
    if spec.init_scheme != InitScheme.KAIMING:
        raise ConfigurationError(f"kaiming_init called with scheme {spec.init_scheme.value}")
    weights = _draw_weights(spec, lambda fan_in: spec.weight_gain * 2.0 / fan_in)
    return DenseNet(spec=spec, weights=weights, biases=_zero_biases(spec))


def unit_normal_init(spec: NetworkSpec) -> DenseNet:
    """Starting point of the data-dependent initializers: W ~ N(0, 1), b = 0."""
    weights = _draw_weights(spec, lambda fan_in: 1.0)
    return DenseNet(spec=spec, weights=weights, biases=_zero_biases(spec))


def forward(net: DenseNet, batch: BatchLike) -> ForwardRecord:
    """Propagate a batch through the network, keeping every intermediate."""
    batch = _as_batch(batch)
    spec = net.spec
    if batch.features != spec.widths[0]:
        raise DimensionError(
            f"batch has {batch.features} features, network expects {spec.widths[0]}"
        )
    if spec.batchnorm and batch.size < 2:
        raise InsufficientBatchError(
            f"batch normalization needs at least 2 samples, got {batch.size}"
        )

    x = batch.data
    activations = [x]
    pre, normalized, means, stds = [], [], [], []
    for w, b in zip(net.weights, net.biases):
        u = x @ w.T + b
        if spec.batchnorm:
            u_hat, mean, std = _batch_normalize(u, spec.bn_epsilon)
            means.append(mean)
            stds.append(std)
        else:
            u_hat = u
        x = _relu(u_hat)
        pre.append(u)
        normalized.append(u_hat)
        activations.append(x)

    return ForwardRecord(
        spec=spec,
        activations=tuple(activations),
        pre=tuple(pre),
        normalized=tuple(normalized),
        batch_mean=tuple(means) if spec.batchnorm else None,
        batch_std=tuple(stds) if spec.batchnorm else None,
    )


def _pool(calibration: Sequence[BatchLike], spec: NetworkSpec) -> np.ndarray:
    batches = [_as_batch(b) for b in calibration]
    if not batches:
        raise ConfigurationError("calibration data is empty")
    for batch in batches:
        if batch.features != spec.widths[0]:
            raise DimensionError(
                f"calibration batch has {batch.features} features, network expects {spec.widths[0]}"
            )
    return np.concatenate([b.data for b in batches], axis=0)


def _calibrate_owned(
    spec: NetworkSpec,
    weights: Sequence[np.ndarray],
    biases: Sequence[np.ndarray],
    calibration: Sequence[BatchLike],
    center: bool,
    epsilon: float,
) -> DenseNet:
    """Calibrate writable parameter arrays in place and wrap them in a DenseNet."""
    # Layer l is calibrated on activations of the already-finalized layers 1..l-1.
    x = _pool(calibration, spec)
    for index, (w, b) in enumerate(zip(weights, biases)):
        u = x @ w.T + b
        if center:
            shift = u.mean(axis=0)
            b -= shift
            u -= shift
        sigma_sq = float(np.mean(u * u))
        scale = 1.0 / math.sqrt(sigma_sq + epsilon)
        w *= scale
        b *= scale
        logger.debug(f"Layer {index + 1}: sigma_B^2={sigma_sq:.6g}, scale={scale:.6g}")

        u *= scale
        if spec.batchnorm:
            u, _, _ = _batch_normalize(u, spec.bn_epsilon)
        x = _relu(u)
    return DenseNet(spec=spec, weights=tuple(weights), biases=tuple(biases))


def _calibrate(
    net: DenseNet,
    calibration: Sequence[BatchLike],
    center: bool,
    epsilon: float,
) -> DenseNet:
    # The source network is read-only and stays untouched.
    return _calibrate_owned(
        net.spec,
        [w.copy() for w in net.weights],
        [b.copy() for b in net.biases],
        calibration,
        center,
        epsilon,
    )


def scale_init(
    net: DenseNet,
    calibration: Sequence[BatchLike],
    epsilon: float = INIT_EPSILON,
) -> DenseNet:
    """Rescale each layer's weights so its pooled second moment is one."""
    return _calibrate(net, calibration, center=False, epsilon=epsilon)


def scale_bias_init(
    net: DenseNet,
    calibration: Sequence[BatchLike],
    epsilon: float = INIT_EPSILON,
) -> DenseNet:
    """Center every feature with its bias, then rescale W and b per layer."""
    return _calibrate(net, calibration, center=True, epsilon=epsilon)


def initialize(
    spec: NetworkSpec,
    calibration: Optional[Sequence[BatchLike]] = None,
    epsilon: float = INIT_EPSILON,
) -> DenseNet:
    """Build a network following ``spec.init_scheme``."""
    if spec.init_scheme == InitScheme.KAIMING:
        return kaiming_init(spec)
    if calibration is None:
        raise ConfigurationError(f"scheme {spec.init_scheme.value} needs calibration data")
    # The unit-normal start is drawn here and rescaled in place, so only one copy exists.
    return _calibrate_owned(
        spec,
        list(_draw_weights(spec, lambda fan_in: 1.0)),
        list(_zero_biases(spec)),
        calibration,
        center=spec.init_scheme == InitScheme.SCALE_BIAS,
        epsilon=epsilon,
    )


def check_record(net: DenseNet, record: ForwardRecord) -> None:
    """Raise ConsistencyError unless ``record`` can have come from ``net``."""
    if record.spec != net.spec:
        raise ConsistencyError("forward record was produced by a different network spec")
    if record.depth != net.depth or len(record.activations) != net.depth + 1:
        raise ConsistencyError(
            f"forward record has {record.depth} layers, network has {net.depth}"
        )
    for layer, u in enumerate(record.pre, start=1):
        if u.shape != (record.samples, net.spec.widths[layer]):
            raise ConsistencyError(f"layer {layer}: pre-activation shape {u.shape} does not match network")
