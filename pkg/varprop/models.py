"""Run ledger persistence."""
from datetime import datetime, timezone
from pathlib import Path

from sqlalchemy import Column, DateTime, Integer, String, Text, UniqueConstraint, create_engine, make_url
from sqlalchemy.orm import Session, declarative_base

Base = declarative_base()


def _utcnow() -> datetime:
    return datetime.now(timezone.utc)


class Run(Base):
    """One execution of an experiment command."""
    __tablename__ = "runs"

    run_id = Column(String, primary_key=True)
    command = Column(String, nullable=False)
    config_hash = Column(String, nullable=False, index=True)
    master_seed = Column(String, nullable=False)  # uint64 does not fit SQLite INTEGER
    fast = Column(Integer, nullable=False, default=0)
    out_dir = Column(String, nullable=False)
    config_json = Column(Text, nullable=False)
    status = Column(String, nullable=False)  # running, succeeded, failed
    files_written = Column(Integer, default=0)
    reproduced = Column(Integer, nullable=True)  # null when there is no earlier run to compare
    error_category = Column(String, nullable=True)
    error_message = Column(Text, nullable=True)
    created_at = Column(DateTime, default=_utcnow)
    completed_at = Column(DateTime, nullable=True)


class Artifact(Base):
    """A file emitted by a run, with its content digest."""
    __tablename__ = "artifacts"

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(String, nullable=False, index=True)
    path = Column(String, nullable=False)
    kind = Column(String, nullable=False)  # csv, json, svg, parquet
    sha256 = Column(String, nullable=False)

    __table_args__ = (
        UniqueConstraint("run_id", "path", name="uix_run_path"),
    )


def init_db(database_url: str):
    """Engine for the ledger with every table created.

    A SQLite file ledger gets its parent directory created first, so a fresh
    output directory works for the CLI and the HTTP service alike.
    """
    url = make_url(database_url)
    if url.get_backend_name() != "sqlite":
        engine = create_engine(url)
    else:
        if url.database and url.database != ":memory:":
            Path(url.database).parent.mkdir(parents=True, exist_ok=True)
        engine = create_engine(url, connect_args={"check_same_thread": False})
    Base.metadata.create_all(engine)
    return engine


def get_session(engine) -> Session:
    return Session(bind=engine)
