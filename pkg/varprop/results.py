"""Result tables and JSON documents with an embedded provenance header."""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Sequence

import pandas as pd

from varprop.config import FAST_WIDTH_CAP, Config, ExperimentConfig
from varprop.errors import ConsistencyError, OutputError

logger = logging.getLogger(__name__)

HEADER_PREFIX = "# "


def provenance(config: ExperimentConfig, **extra: Any) -> Dict[str, Any]:
    """Header fields written into every emitted file."""
    header = {
        "artifact_version": Config.ARTIFACT_VERSION,
        "command": config.command,
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "fast": config.fast,
    }
    if config.fast:
        header["fast_mode"] = f"widths capped at {FAST_WIDTH_CAP}, default network count halved"
    header.update(extra)
    return header


@dataclass
class ResultTable:
    """Rectangular numeric table plus its provenance header."""

    frame: pd.DataFrame
    header: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_columns(cls, data: Dict[str, Sequence[Any]], header: Dict[str, Any]) -> "ResultTable":
        lengths = {name: len(values) for name, values in data.items()}
        if len(set(lengths.values())) > 1:
            raise ConsistencyError(f"columns have different lengths: {lengths}")
        return cls(frame=pd.DataFrame(data), header=header)

    @property
    def columns(self) -> List[str]:
        return list(self.frame.columns)

    def write_csv(self, path: Path) -> Path:
        """Write header comment lines followed by the table."""
        path = Path(path)
        lines = [f"{HEADER_PREFIX}{key}={self.header[key]}" for key in sorted(self.header)]
        body = self.frame.to_csv(index=False, lineterminator="\n", na_rep="nan")
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("\n".join(lines) + "\n" + body, encoding="utf-8")
        except OSError as e:
            raise OutputError(f"cannot write table ({e.strerror})", str(path)) from e
        logger.info(f"Wrote {path} ({len(self.frame)} rows)")
        return path


def read_csv(path: Path) -> pd.DataFrame:
    """Read a table written by ``ResultTable.write_csv``, skipping the header."""
    try:
        return pd.read_csv(path, comment="#")
    except OSError as e:
        raise OutputError(f"cannot read table ({e.strerror})", str(path)) from e


def read_header(path: Path) -> Dict[str, str]:
    header = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.startswith(HEADER_PREFIX):
                break
            key, _, value = line[len(HEADER_PREFIX):].rstrip("\n").partition("=")
            header[key] = value
    return header


def write_json(path: Path, document: Dict[str, Any]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(document, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise OutputError(f"cannot write document ({e.strerror})", str(path)) from e
    logger.info(f"Wrote {path}")
    return path
