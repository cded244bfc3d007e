"""Configuration management for varprop experiments."""
import hashlib
import json
import os
from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, Field, field_validator

from varprop import __version__
from varprop.errors import ConfigurationError

COMMANDS = ("theory", "finite-width", "gradients", "init-check", "distributions")
GRADIENT_SCHEMES = ("kaiming", "scale_bias", "kaiming+bn")
INIT_CHECK_SCHEMES = ("scale", "scale_bias")
FAST_WIDTH_CAP = 1000


class Config:
    """Process-wide settings loaded from environment variables."""

    # Output
    OUT_DIR: str = os.getenv("VARPROP_OUT_DIR", "results")

    # Run ledger; empty means a SQLite file inside the output directory
    DATABASE_URL: Optional[str] = os.getenv("VARPROP_DATABASE_URL")

    LOG_LEVEL: str = os.getenv("VARPROP_LOG_LEVEL", "INFO")

    # Concurrent network work items per ensemble
    WORKERS: int = int(os.getenv("VARPROP_WORKERS", "1"))

    QUADRATURE_NODES: int = int(os.getenv("VARPROP_QUADRATURE_NODES", "64"))

    # Data-dependent initializers
    CALIBRATION_BATCHES: int = int(os.getenv("VARPROP_CALIBRATION_BATCHES", "5"))
    CALIBRATION_BATCH_SIZE: int = int(os.getenv("VARPROP_CALIBRATION_BATCH_SIZE", "128"))
    INIT_EPSILON: float = float(os.getenv("VARPROP_INIT_EPSILON", "1e-5"))

    # HTTP service
    HOST: str = os.getenv("VARPROP_HOST", "127.0.0.1")
    PORT: int = int(os.getenv("VARPROP_PORT", "8000"))

    ARTIFACT_VERSION: str = __version__

    @classmethod
    def database_url(cls, out_dir: Optional[str] = None) -> str:
        """Ledger URL, defaulting to ``<out_dir>/runs.db``."""
        if cls.DATABASE_URL:
            return cls.DATABASE_URL
        directory = Path(out_dir or cls.OUT_DIR)
        return f"sqlite:///{directory / 'runs.db'}"


_DEFAULTS = {
    "theory": {"depth": 50},
    "finite-width": {"depth": 50, "widths": [30, 100, 300, 1000], "networks": 30, "samples": 100},
    "gradients": {
        "depth": 50,
        "widths": [3000],
        "networks": 30,
        "samples": 100,
        "schemes": list(GRADIENT_SCHEMES),
    },
    "init-check": {"depth": 50, "widths": [500], "networks": 1, "samples": 128,
                   "schemes": list(INIT_CHECK_SCHEMES)},
    "distributions": {"depth": 50, "widths": [1000], "networks": 30, "samples": 200},
}


class ExperimentConfig(BaseModel):
    """Parameters of one experiment command; unset fields take per-command defaults."""

    command: Literal["theory", "finite-width", "gradients", "init-check", "distributions"]
    depth: Optional[int] = Field(None, ge=1)
    widths: Optional[List[int]] = None
    samples: Optional[int] = Field(None, ge=1)
    networks: Optional[int] = Field(None, ge=1)
    seed: int = Field(0, ge=0, le=2**64 - 1)
    schemes: Optional[List[str]] = None
    batchnorm: bool = False
    frozen_stats: bool = False
    nodes: int = Field(default_factory=lambda: Config.QUADRATURE_NODES, ge=16)
    bn_epsilon: float = Field(1e-5, gt=0.0)
    calibration_batches: int = Field(default_factory=lambda: Config.CALIBRATION_BATCHES, ge=1)
    calibration_batch_size: int = Field(default_factory=lambda: Config.CALIBRATION_BATCH_SIZE, ge=1)
    bins: int = Field(40, ge=2)
    fast: bool = False
    out: str = Field(default_factory=lambda: Config.OUT_DIR)
    workers: int = Field(default_factory=lambda: Config.WORKERS, ge=1)

    @field_validator("widths")
    @classmethod
    def _check_widths(cls, widths: Optional[List[int]]) -> Optional[List[int]]:
        if widths is not None:
            if not widths:
                raise ValueError("widths list is empty")
            if any(w < 1 for w in widths):
                raise ValueError(f"widths must be positive, got {widths}")
        return widths

    def resolved(self) -> "ExperimentConfig":
        """Fill unset fields from the command defaults and apply fast mode."""
        defaults = _DEFAULTS[self.command]
        values = self.model_dump()
        explicit_networks = self.networks is not None
        for key, value in defaults.items():
            if values.get(key) is None:
                values[key] = value
        if self.fast:
            if values.get("widths"):
                values["widths"] = [min(w, FAST_WIDTH_CAP) for w in values["widths"]]
            if values.get("networks") and not explicit_networks:
                count = values["networks"]
                values["networks"] = max(min(2, count), count // 2)
        resolved = ExperimentConfig(**values)
        resolved._check_command()
        return resolved

    def _check_command(self) -> None:
        allowed = {"gradients": GRADIENT_SCHEMES, "init-check": INIT_CHECK_SCHEMES}.get(self.command)
        if allowed and self.schemes:
            unknown = [s for s in self.schemes if s not in allowed]
            if unknown:
                raise ConfigurationError(
                    f"{self.command} accepts schemes {list(allowed)}, got {unknown}"
                )
        if self.command in ("finite-width", "gradients"):
            if self.networks < 2:
                raise ConfigurationError(f"{self.command} needs at least 2 networks")
            if self.samples < 2:
                raise ConfigurationError(f"{self.command} needs at least 2 samples")

    def config_hash(self) -> str:
        """Digest of every field that affects results."""
        payload = self.model_dump(mode="json", exclude={"out", "workers"})
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    @property
    def out_dir(self) -> Path:
        return Path(self.out)
