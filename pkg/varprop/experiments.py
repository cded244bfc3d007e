"""Experiment commands.

Each ``cmd_*`` function resolves its configuration, runs its ensemble and
writes CSV/JSON tables plus SVG plots into ``config.out``. It returns the
paths it wrote, in the order they were written.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, TypeVar

import numpy as np

from varprop import rng
from varprop.config import Config, ExperimentConfig
from varprop.errors import ConfigurationError, DegenerateTraceError
from varprop.gradients import (
    GradientTrace,
    backward,
    default_fit_range,
    gradient_slope,
    random_linear_loss_grad,
)
from varprop.meanfield import QuadratureConfig, bn_predictions, theoretical_ratio, trajectory
from varprop.network import DenseNet, InitScheme, NetworkSpec, forward, initialize, kaiming_init
from varprop.plotting import Series, line_plot, step_plot
from varprop.results import ResultTable, provenance, write_json
from varprop.stats import aggregate, aggregate_traces, layer_stats, max_abs_feature_mean, sign_persistence
from varprop.storage import write_network

logger = logging.getLogger(__name__)

T = TypeVar("T")

# Slope tolerances, (default, fast).
KAIMING_SLOPE_TOLERANCE = (0.02, 0.04)
SLOPE_TOLERANCE = (0.05, 0.08)

DISTRIBUTION_FEATURES = 3


def scheme_slug(scheme: str) -> str:
    """File-safe form of a gradient scheme name: ``kaiming+bn`` -> ``kaiming_bn``."""
    return scheme.replace("+", "_")


def _map_ensemble(fn: Callable[[int], T], count: int, workers: int) -> List[T]:
    """Run ``fn`` over network indices, results in index order."""
    if workers <= 1:
        return [fn(index) for index in range(count)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(count)))


def _quadrature(config: ExperimentConfig) -> QuadratureConfig:
    return QuadratureConfig(node_count=config.nodes)


def _description(config: ExperimentConfig) -> str:
    return f"varprop {config.command} config_hash={config.config_hash()} seed={config.seed}"


def _finite(value: float) -> Optional[float]:
    return float(value) if math.isfinite(value) else None


def _calibration_batches(config: ExperimentConfig, width: int, index: int) -> List[np.ndarray]:
    return [
        rng.gaussian_batch(
            rng.experiment_seed(config.seed, config.command, width, index, rng.CALIBRATION, k),
            (config.calibration_batch_size, width),
        )
        for k in range(config.calibration_batches)
    ]


def cmd_theory(config: ExperimentConfig) -> List[Path]:
    """Mean-field trajectory table and the m / v plot."""
    config = config.resolved()
    traj = trajectory(config.depth, _quadrature(config))
    layers = np.arange(1, traj.depth + 1)
    table = ResultTable.from_columns(
        {
            "layer": layers,
            "c": traj.c[1:],
            "m": traj.m,
            "v": traj.v,
            "sigma": np.full(traj.depth, traj.sigma),
            "m_sq": traj.m_sq,
            "v_sq": traj.v_sq,
            "ratio": [theoretical_ratio(traj, l) for l in range(traj.depth)],
        },
        provenance(config, depth=config.depth, nodes=config.nodes),
    )
    out = config.out_dir
    csv_path = table.write_csv(out / "theory.csv")
    svg_path = line_plot(
        out / "theory.svg",
        [Series(csv_path, "layer", "m", "m (sample mean)"), Series(csv_path, "layer", "v", "v (sample std)")],
        xlabel="layer",
        ylabel="value",
        title="Wide-network sample statistics",
        description=_description(config),
    )
    return [csv_path, svg_path]


def cmd_finite_width(config: ExperimentConfig) -> List[Path]:
    """Ensemble mean-to-std ratio per layer for each width, against the wide-network curve."""
    config = config.resolved()
    traj = trajectory(config.depth, _quadrature(config))
    theory = [theoretical_ratio(traj, l) for l in range(traj.depth)]
    out = config.out_dir
    written: List[Path] = []
    series: List[Series] = []

    for width in config.widths:
        logger.info(f"finite-width: width {width}, {config.networks} networks, T={config.samples}")

        def run_network(index: int, width: int = width):
            seed = rng.experiment_seed(config.seed, config.command, width, index, rng.NETWORK)
            spec = NetworkSpec.uniform(
                width, config.depth, batchnorm=config.batchnorm, seed=seed, bn_epsilon=config.bn_epsilon
            )
            net = kaiming_init(spec)
            inputs = rng.gaussian_batch(
                rng.experiment_seed(config.seed, config.command, width, index, rng.INPUTS),
                (config.samples, width),
            )
            record = forward(net, inputs)
            return layer_stats(record), sign_persistence(record)

        results = _map_ensemble(run_network, config.networks, config.workers)
        summary = aggregate([stats for stats, _ in results])
        persistence = np.mean([fraction for _, fraction in results], axis=0)
        logger.debug(f"width {width}: r at layer {config.depth} = {summary.r_mean[-1]:.6g}")

        table = ResultTable.from_columns(
            {
                "layer": np.arange(1, config.depth + 1),
                "r_mean": summary.r_mean,
                "r_std": summary.r_std,
                "r_stderr": summary.r_stderr,
                "valid_networks": summary.valid_count,
                "mhat_sq_mean": summary.mhat_sq_mean,
                "vhat_sq_mean": summary.vhat_sq_mean,
                "pooled_sq_mean": summary.pooled_sq_mean,
                "sign_persistent": persistence,
                "theory_ratio": theory,
            },
            provenance(
                config,
                width=width,
                depth=config.depth,
                networks=config.networks,
                samples=config.samples,
                batchnorm=config.batchnorm,
            ),
        )
        csv_path = table.write_csv(out / f"ratio_w{width}.csv")
        written.append(csv_path)
        series.append(Series(csv_path, "layer", "r_mean", f"width {width}", band="r_std"))

    series.append(Series(written[0], "layer", "theory_ratio", "wide-network theory", dashed=True))
    written.append(
        line_plot(
            out / "ratio.svg",
            series,
            xlabel="layer",
            ylabel="sample mean / sample std",
            title="Mean-to-std ratio in finite networks",
            description=_description(config),
        )
    )
    return written


def _gradient_spec(scheme: str, width: int, depth: int, seed: int, bn_epsilon: float) -> NetworkSpec:
    if scheme == "kaiming":
        return NetworkSpec.uniform(width, depth, seed=seed, bn_epsilon=bn_epsilon)
    if scheme == "kaiming+bn":
        return NetworkSpec.uniform(width, depth, batchnorm=True, seed=seed, bn_epsilon=bn_epsilon)
    if scheme == "scale_bias":
        return NetworkSpec.uniform(
            width, depth, init_scheme=InitScheme.SCALE_BIAS, seed=seed, bn_epsilon=bn_epsilon
        )
    raise ConfigurationError(f"unknown gradient scheme {scheme!r}")


def _slope_tolerance(scheme: str, fast: bool) -> float:
    pair = KAIMING_SLOPE_TOLERANCE if scheme == "kaiming" else SLOPE_TOLERANCE
    return pair[1] if fast else pair[0]


def _slope_summary(
    scheme: str,
    traces: Sequence[GradientTrace],
    fit_range: tuple,
    target: float,
    tolerance: float,
) -> Dict[str, object]:
    summary = aggregate_traces(traces)
    mean_trace = GradientTrace(g2=summary.g2_mean, spec=traces[0].spec, w_seed=traces[0].w_seed)
    try:
        slope_of_mean: Optional[float] = _finite(gradient_slope(mean_trace, *fit_range))
    except DegenerateTraceError as e:
        logger.warning(f"{scheme}: ensemble-mean gradient is degenerate, no slope reported ({e})")
        slope_of_mean = None

    slopes = []
    for index, trace in enumerate(traces):
        try:
            slopes.append(gradient_slope(trace, *fit_range))
        except DegenerateTraceError as e:
            logger.warning(f"{scheme}: network {index} skipped in per-network slopes ({e})")
    slopes = np.array(slopes)
    return {
        "slope_of_mean": slope_of_mean,
        "slope_mean": _finite(float(slopes.mean())) if slopes.size else None,
        "slope_std": _finite(float(slopes.std())) if slopes.size else None,
        "networks": summary.network_count,
        "fitted_networks": int(slopes.size),
        "target": target,
        "tolerance": tolerance,
        "within_tolerance": slope_of_mean is not None and abs(slope_of_mean - target) <= tolerance,
    }


def _scheme_traces(config: ExperimentConfig, width: int, index: int) -> Dict[str, GradientTrace]:
    """Gradient trace of network ``index`` under every configured scheme.

    Every scheme sees the same seed, inputs and loss vector. The scale+bias
    network is built and released before the Kaiming weights are drawn, so at
    most one set of weights is alive at a time; ``kaiming`` and ``kaiming+bn``
    share theirs.
    """
    seed = rng.experiment_seed(config.seed, config.command, width, index, rng.NETWORK)
    w_seed = rng.experiment_seed(config.seed, config.command, width, index, rng.LOSS)
    inputs = rng.gaussian_batch(
        rng.experiment_seed(config.seed, config.command, width, index, rng.INPUTS),
        (config.samples, width),
    )
    kaiming: Optional[DenseNet] = None
    result = {}
    for scheme in sorted(config.schemes, key=lambda s: s != "scale_bias"):
        spec = _gradient_spec(scheme, width, config.depth, seed, config.bn_epsilon)
        if scheme == "scale_bias":
            net = initialize(spec, _calibration_batches(config, width, index), Config.INIT_EPSILON)
        else:
            if kaiming is None:
                kaiming = kaiming_init(spec.model_copy(update={"batchnorm": False}))
            net = DenseNet(spec=spec, weights=kaiming.weights, biases=kaiming.biases)
        record = forward(net, inputs)
        out_grad = random_linear_loss_grad(record.activations[-1], w_seed)
        frozen = config.frozen_stats and spec.batchnorm
        result[scheme] = backward(net, record, out_grad, w_seed=w_seed, frozen_stats=frozen)
        del net, record
    return {scheme: result[scheme] for scheme in config.schemes}


def cmd_gradients(config: ExperimentConfig) -> List[Path]:
    """Per-layer squared activation gradients for each scheme and the fitted log-slopes."""
    config = config.resolved()
    bn = bn_predictions(_quadrature(config))
    fit_range = default_fit_range(config.depth)
    out = config.out_dir
    traces: Dict[str, Dict[int, List[GradientTrace]]] = {scheme: {} for scheme in config.schemes}

    for width in config.widths:
        logger.info(
            f"gradients: width {width}, {config.networks} networks, schemes {', '.join(config.schemes)}"
        )

        def run_network(index: int, width: int = width) -> Dict[str, GradientTrace]:
            return _scheme_traces(config, width, index)

        for per_network in _map_ensemble(run_network, config.networks, config.workers):
            for scheme, trace in per_network.items():
                traces[scheme].setdefault(width, []).append(trace)

    written: List[Path] = []
    series: List[Series] = []
    slopes: Dict[str, Dict[str, object]] = {}
    for scheme in config.schemes:
        frames = {"width": [], "layer": [], "g2_mean": [], "g2_std": [], "log_g2_mean": []}
        slopes[scheme] = {}
        target = 0.0 if scheme == "kaiming" else bn.slope
        tolerance = _slope_tolerance(scheme, config.fast)
        for width in config.widths:
            summary = aggregate_traces(traces[scheme][width])
            with np.errstate(divide="ignore"):
                log_mean = np.log(summary.g2_mean)
            frames["width"].extend([width] * len(summary.g2_mean))
            frames["layer"].extend(range(len(summary.g2_mean)))
            frames["g2_mean"].extend(summary.g2_mean)
            frames["g2_std"].extend(summary.g2_std)
            frames["log_g2_mean"].extend(log_mean)
            slopes[scheme][str(width)] = _slope_summary(
                scheme, traces[scheme][width], fit_range, target, tolerance
            )
            logger.info(f"{scheme} width {width}: slope {slopes[scheme][str(width)]['slope_of_mean']}")

        table = ResultTable.from_columns(
            frames,
            provenance(
                config,
                scheme=scheme,
                depth=config.depth,
                networks=config.networks,
                samples=config.samples,
                frozen_stats=config.frozen_stats,
            ),
        )
        csv_path = table.write_csv(out / f"grads_{scheme_slug(scheme)}.csv")
        written.append(csv_path)
        for width in config.widths:
            series.append(Series(csv_path, "layer", "g2_mean", f"{scheme} w={width}", where=("width", width)))

    written.append(
        line_plot(
            out / "grads.svg",
            series,
            xlabel="layer",
            ylabel="mean (dL/dx)^2",
            title="Gradients vs. layer",
            log_y=True,
            description=_description(config),
        )
    )
    document = {
        "provenance": provenance(config),
        "theory": {"sigma_s": bn.sigma_s, "amplification": bn.amplification, "slope": bn.slope},
        "fit_range": list(fit_range),
        "schemes": slopes,
    }
    written.append(write_json(out / "slopes.json", document))
    return written


def cmd_init_check(config: ExperimentConfig) -> List[Path]:
    """Post-conditions of the data-dependent initializers on calibration and held-out data."""
    config = config.resolved()
    out = config.out_dir
    columns = [
        "scheme",
        "width",
        "network",
        "layer",
        "calibration_max_abs_mean",
        "calibration_second_moment",
        "calibration_variance",
        "heldout_max_abs_mean",
        "heldout_second_moment",
        "heldout_variance",
    ]
    rows: Dict[str, list] = {name: [] for name in columns}
    written: List[Path] = []

    for scheme in config.schemes:
        for width in config.widths:
            logger.info(f"init-check: {scheme}, width {width}, {config.networks} network(s)")

            def run_network(index: int, width: int = width, scheme: str = scheme):
                seed = rng.experiment_seed(config.seed, config.command, width, index, rng.NETWORK)
                spec = NetworkSpec.uniform(
                    width,
                    config.depth,
                    init_scheme=InitScheme(scheme),
                    batchnorm=config.batchnorm,
                    seed=seed,
                    bn_epsilon=config.bn_epsilon,
                )
                calibration = _calibration_batches(config, width, index)
                net = initialize(spec, calibration, Config.INIT_EPSILON)
                heldout = rng.gaussian_batch(
                    rng.experiment_seed(config.seed, config.command, width, index, rng.HELDOUT),
                    (config.samples, width),
                )
                checks = []
                for batch in (np.concatenate(calibration, axis=0), heldout):
                    record = forward(net, batch)
                    stats = layer_stats(record, raw=True)
                    checks.append((max_abs_feature_mean(record, raw=True), stats.pooled_sq, stats.vhat_sq))
                return net, checks

            for index, (net, checks) in enumerate(_map_ensemble(run_network, config.networks, config.workers)):
                (cal_mean, cal_second, cal_var), (held_mean, held_second, held_var) = checks
                rows["scheme"].extend([scheme] * config.depth)
                rows["width"].extend([width] * config.depth)
                rows["network"].extend([index] * config.depth)
                rows["layer"].extend(range(1, config.depth + 1))
                rows["calibration_max_abs_mean"].extend(cal_mean)
                rows["calibration_second_moment"].extend(cal_second)
                rows["calibration_variance"].extend(cal_var)
                rows["heldout_max_abs_mean"].extend(held_mean)
                rows["heldout_second_moment"].extend(held_second)
                rows["heldout_variance"].extend(held_var)
                if index == 0:
                    dump = out / f"network_{scheme}_w{width}.parquet"
                    out.mkdir(parents=True, exist_ok=True)
                    write_network(net, str(dump), provenance(config, scheme=scheme, width=width))
                    written.append(dump)

    table = ResultTable.from_columns(
        rows,
        provenance(
            config,
            depth=config.depth,
            samples=config.samples,
            calibration_batches=config.calibration_batches,
            calibration_batch_size=config.calibration_batch_size,
            init_epsilon=Config.INIT_EPSILON,
        ),
    )
    written.insert(0, table.write_csv(out / "init_check.csv"))
    return written


def _distribution_layers(depth: int) -> List[int]:
    return [1] if depth == 1 else [1, depth]


def cmd_distributions(config: ExperimentConfig) -> List[Path]:
    """Pre-activation histograms of a fixed network versus the pooled ensemble."""
    config = config.resolved()
    width = config.widths[0]
    layers = _distribution_layers(config.depth)
    picker = rng.generator(rng.experiment_seed(config.seed, config.command, width, 0, rng.FEATURE_PICK))
    features = np.sort(picker.choice(width, size=min(DISTRIBUTION_FEATURES, width), replace=False))
    pooled_feature = int(features[0])
    logger.info(
        f"distributions: width {width}, {config.networks} networks, features {features.tolist()}"
    )

    def run_network(index: int) -> Dict[int, np.ndarray]:
        seed = rng.experiment_seed(config.seed, config.command, width, index, rng.NETWORK)
        spec = NetworkSpec.uniform(
            width, config.depth, batchnorm=config.batchnorm, seed=seed, bn_epsilon=config.bn_epsilon
        )
        inputs = rng.gaussian_batch(
            rng.experiment_seed(config.seed, config.command, width, index, rng.INPUTS),
            (config.samples, width),
        )
        record = forward(kaiming_init(spec), inputs)
        # Network 0 keeps every picked feature; the rest only the pooled one.
        kept = features if index == 0 else features[:1]
        return {layer: record.normalized[layer - 1][:, kept] for layer in layers}

    per_network = _map_ensemble(run_network, config.networks, config.workers)

    rows: Dict[str, list] = {"layer": [], "series": [], "bin_center": [], "density": []}
    for layer in layers:
        fixed = per_network[0][layer]
        pooled = np.concatenate([values[layer][:, 0] for values in per_network])
        samples = {f"network0_feature{int(f)}": fixed[:, j] for j, f in enumerate(features)}
        samples[f"pooled_feature{pooled_feature}"] = pooled
        everything = np.concatenate(list(samples.values()))
        low, high = float(everything.min()), float(everything.max())
        if high <= low:
            high = low + 1.0
        for name in sorted(samples):
            density, edges = np.histogram(samples[name], bins=config.bins, range=(low, high), density=True)
            rows["layer"].extend([layer] * config.bins)
            rows["series"].extend([name] * config.bins)
            rows["bin_center"].extend(0.5 * (edges[:-1] + edges[1:]))
            rows["density"].extend(density)

    table = ResultTable.from_columns(
        rows,
        provenance(
            config,
            width=width,
            depth=config.depth,
            networks=config.networks,
            samples=config.samples,
            bins=config.bins,
            batchnorm=config.batchnorm,
        ),
    )
    out = config.out_dir
    csv_path = table.write_csv(out / "distributions.csv")
    svg_path = step_plot(
        out / "distributions.svg",
        csv_path,
        group="series",
        x="bin_center",
        y="density",
        xlabel="pre-activation",
        ylabel="density",
        facet="layer",
        description=_description(config),
    )
    return [csv_path, svg_path]


COMMANDS: Dict[str, Callable[[ExperimentConfig], List[Path]]] = {
    "theory": cmd_theory,
    "finite-width": cmd_finite_width,
    "gradients": cmd_gradients,
    "init-check": cmd_init_check,
    "distributions": cmd_distributions,
}


def run_command(config: ExperimentConfig) -> List[Path]:
    """Dispatch ``config.command``; returns the written paths."""
    config = config.resolved()
    logger.info(f"Running {config.command} (config {config.config_hash()}, seed {config.seed})")
    return COMMANDS[config.command](config)
