"""HTTP surface over the run service."""
import logging
from contextlib import asynccontextmanager
from functools import lru_cache
from typing import Iterator, Optional

from fastapi import Depends, FastAPI, HTTPException
from pydantic import BaseModel, Field
from sqlalchemy.orm import Session

from varprop import __version__
from varprop.config import Config, ExperimentConfig
from varprop.meanfield import MIN_NODE_COUNT
from varprop.models import get_session, init_db
from varprop.run_service import RunService

logger = logging.getLogger(__name__)


@lru_cache(maxsize=None)
def get_engine():
    return init_db(Config.database_url())


def get_db() -> Iterator[Session]:
    db_session = get_session(get_engine())
    try:
        yield db_session
    finally:
        db_session.close()


@asynccontextmanager
async def lifespan(app: FastAPI):
    """Lifespan context manager for startup/shutdown events."""
    logger.info(f"Starting varprop service {__version__}")
    logger.info(f"Output directory: {Config.OUT_DIR}")
    yield
    logger.info("Shutting down varprop service")


app = FastAPI(title="varprop", version=__version__, lifespan=lifespan)


class PreviewRequest(BaseModel):
    depth: int = Field(50, ge=1)
    nodes: Optional[int] = Field(None, ge=MIN_NODE_COUNT)


@app.get("/health")
def health():
    """Health check endpoint."""
    return {"ok": True}


@app.post("/runs")
def create_run(req: ExperimentConfig, db_session: Session = Depends(get_db)):
    """
    Create and execute a run synchronously.

    The request blocks until every file of the command has been written.
    Failures are recorded in the ledger and returned with status "failed".
    """
    return RunService(db_session, Config).process_run(req)


@app.get("/runs")
def list_runs(limit: int = 50, db_session: Session = Depends(get_db)):
    """Most recent runs first."""
    return RunService(db_session, Config).list_runs(limit)


@app.get("/runs/{run_id}")
def get_run(run_id: str, db_session: Session = Depends(get_db)):
    """Get the status and artifacts of a run."""
    result = RunService(db_session, Config).get_run_status(run_id)

    if not result:
        raise HTTPException(status_code=404, detail=f"Run {run_id} not found")

    return result


@app.post("/preview")
def preview(req: PreviewRequest, db_session: Session = Depends(get_db)):
    """Mean-field trajectory and batch-norm predictions without running an ensemble."""
    return RunService(db_session, Config).preview_theory(req.depth, req.nodes)
