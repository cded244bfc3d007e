"""Service that executes experiment commands and keeps the run ledger."""
import hashlib
import json
import logging
import uuid
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional

from pydantic import ValidationError
from sqlalchemy.orm import Session

from varprop.config import Config, ExperimentConfig
from varprop.errors import VarpropError
from varprop.experiments import run_command
from varprop.meanfield import QuadratureConfig, bn_predictions, theoretical_ratio, trajectory
from varprop.models import Artifact, Run

logger = logging.getLogger(__name__)

# Kinds whose bytes are covered by the determinism contract.
AUDITED_KINDS = ("csv", "json")


def file_digest(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _utcnow() -> datetime:
    return datetime.now(timezone.utc)


def _error_category(error: Exception) -> str:
    if isinstance(error, VarpropError):
        return error.category
    if isinstance(error, ValidationError):
        return "configuration"
    return "internal"


class RunService:
    """Runs experiments and records them, with their artifacts, in the ledger."""

    def __init__(self, db_session: Session, config: Config = Config):
        self.db_session = db_session
        self.config = config

    def process_run(self, experiment: ExperimentConfig, raise_errors: bool = False) -> Dict:
        """
        Execute one experiment command and record it.

        Args:
            experiment: Parameters of the command; unset fields take the command defaults
            raise_errors: Re-raise a failure after it has been recorded

        Returns:
            Dictionary with run_id, status, written files and the reproducibility flag
        """
        run_id = str(uuid.uuid4())
        run = Run(
            run_id=run_id,
            command=experiment.command,
            config_hash="",
            master_seed=str(experiment.seed),
            fast=1 if experiment.fast else 0,
            out_dir=experiment.out,
            config_json=experiment.model_dump_json(),
            status="running",
        )
        self.db_session.add(run)
        self.db_session.commit()

        try:
            resolved = experiment.resolved()
            run.config_hash = resolved.config_hash()
            run.config_json = resolved.model_dump_json()
            self.db_session.commit()

            paths = run_command(resolved)
            for path in paths:
                self.db_session.add(
                    Artifact(
                        run_id=run_id,
                        path=str(path),
                        kind=Path(path).suffix.lstrip("."),
                        sha256=file_digest(path),
                    )
                )
            run.files_written = len(paths)
            self.db_session.commit()

            reproduced = self._check_reproduced(run)
            run.reproduced = None if reproduced is None else int(reproduced)
            run.status = "succeeded"
            run.completed_at = _utcnow()
            self.db_session.commit()

            if reproduced is False:
                logger.warning(f"Run {run_id} differs from an earlier run with config {run.config_hash}")
            logger.info(f"Run {run_id} completed successfully ({len(paths)} files)")
            return {
                "run_id": run_id,
                "status": "succeeded",
                "config_hash": run.config_hash,
                "files": [str(p) for p in paths],
                "reproduced": reproduced,
            }

        except Exception as e:
            category = _error_category(e)
            logger.error(f"Run {run_id} failed: {str(e)}", exc_info=category == "internal")
            self.db_session.rollback()
            run.status = "failed"
            run.error_category = category
            run.error_message = str(e)
            run.completed_at = _utcnow()
            self.db_session.commit()
            if raise_errors:
                raise
            return {"run_id": run_id, "status": "failed", "error_category": category, "error": str(e)}

    def _audited_digests(self, run_id: str) -> Dict[str, str]:
        artifacts = (
            self.db_session.query(Artifact)
            .filter(Artifact.run_id == run_id, Artifact.kind.in_(AUDITED_KINDS))
            .all()
        )
        return {Path(a.path).name: a.sha256 for a in artifacts}

    def _check_reproduced(self, run: Run) -> Optional[bool]:
        """Compare CSV/JSON digests with the latest earlier succeeded run of the same config."""
        earlier = (
            self.db_session.query(Run)
            .filter(
                Run.config_hash == run.config_hash,
                Run.status == "succeeded",
                Run.run_id != run.run_id,
            )
            .order_by(Run.completed_at.desc())
            .first()
        )
        if not earlier:
            return None
        return self._audited_digests(earlier.run_id) == self._audited_digests(run.run_id)

    def get_run_status(self, run_id: str) -> Optional[Dict]:
        """Get the status and artifacts of a run."""
        run = self.db_session.query(Run).filter(Run.run_id == run_id).first()

        if not run:
            return None

        artifacts = self.db_session.query(Artifact).filter(Artifact.run_id == run_id).order_by(Artifact.id).all()
        return {
            **self._summary(run),
            "config": json.loads(run.config_json),
            "out_dir": run.out_dir,
            "files_written": run.files_written,
            "artifacts": [{"path": a.path, "kind": a.kind, "sha256": a.sha256} for a in artifacts],
            "error_category": run.error_category,
            "error_message": run.error_message,
            "completed_at": run.completed_at.isoformat() if run.completed_at else None,
        }

    def list_runs(self, limit: int = 50) -> List[Dict]:
        """Most recent runs first."""
        runs = self.db_session.query(Run).order_by(Run.created_at.desc()).limit(limit).all()
        return [self._summary(run) for run in runs]

    @staticmethod
    def _summary(run: Run) -> Dict:
        return {
            "run_id": run.run_id,
            "command": run.command,
            "config_hash": run.config_hash,
            "seed": run.master_seed,
            "fast": bool(run.fast),
            "status": run.status,
            "reproduced": None if run.reproduced is None else bool(run.reproduced),
            "created_at": run.created_at.isoformat() if run.created_at else None,
        }

    def preview_theory(self, depth: int, nodes: Optional[int] = None) -> Dict:
        """
        Mean-field trajectory and batch-norm predictions, nothing written.

        Args:
            depth: Number of layers
            nodes: Quadrature nodes per axis, defaulting to Config.QUADRATURE_NODES

        Returns:
            Dictionary with per-layer rows and the batch-norm predictions
        """
        q = QuadratureConfig(node_count=nodes or self.config.QUADRATURE_NODES)
        traj = trajectory(depth, q)
        bn = bn_predictions(q)
        return {
            "depth": depth,
            "nodes": q.node_count,
            "layers": [
                {
                    "layer": l + 1,
                    "c": float(traj.c[l + 1]),
                    "m": float(traj.m[l]),
                    "v": float(traj.v[l]),
                    "ratio": theoretical_ratio(traj, l),
                }
                for l in range(traj.depth)
            ],
            "batchnorm": {"sigma_s": bn.sigma_s, "amplification": bn.amplification, "slope": bn.slope},
        }
