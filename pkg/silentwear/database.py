"""Run registry: evaluation runs and model artifacts in SQLite via SQLAlchemy."""

from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional
from uuid import uuid4

from loguru import logger
from sqlalchemy import JSON, Column, DateTime, Float, Integer, String, Text, create_engine, func
from sqlalchemy.exc import SQLAlchemyError
from sqlalchemy.orm import Session, declarative_base, sessionmaker

Base = declarative_base()


class EvalRun(Base):
    """One evaluation, ablation or incremental run."""

    __tablename__ = "eval_runs"

    id = Column(String(36), primary_key=True)
    command = Column(String(50), nullable=False)
    setting = Column(String(20))
    subject = Column(String(50))
    condition = Column(String(20))
    window_ms = Column(Integer)
    mean_accuracy = Column(Float)
    std_accuracy = Column(Float)
    n_folds = Column(Integer, default=0)
    mean_itr = Column(Float)
    report_path = Column(Text)
    config = Column(JSON)
    created_at = Column(DateTime, default=datetime.utcnow)


class ModelArtifact(Base):
    """A float or quantized model file."""

    __tablename__ = "model_artifacts"

    id = Column(String(36), primary_key=True)
    path = Column(Text, nullable=False)
    kind = Column(String(20), nullable=False)  # float | quantized
    param_count = Column(Integer)
    footprint_bytes = Column(Integer)
    created_at = Column(DateTime, default=datetime.utcnow)


def _iso(value: Optional[datetime]) -> Optional[str]:
    return value.isoformat() if value else None


class Registry:
    """Registry manager."""

    def __init__(self, db_path: str = "data/silentwear.db"):
        if db_path != ":memory:":
            Path(db_path).parent.mkdir(parents=True, exist_ok=True)
        self.engine = create_engine(f"sqlite:///{db_path}")
        Base.metadata.create_all(self.engine)
        self.SessionLocal = sessionmaker(bind=self.engine)

    def get_session(self) -> Session:
        return self.SessionLocal()

    def save_eval_run(
        self,
        command: str,
        summary: Dict[str, Any],
        report_path: Optional[str] = None,
        config: Optional[Dict[str, Any]] = None,
    ) -> Optional[str]:
        """Record a run summary. Returns the run id, or None on failure."""
        session = self.get_session()
        try:
            run = EvalRun(
                id=str(uuid4()),
                command=command,
                setting=summary.get("setting"),
                subject=summary.get("subject"),
                condition=summary.get("condition"),
                window_ms=summary.get("window_ms"),
                mean_accuracy=summary.get("mean"),
                std_accuracy=summary.get("std"),
                n_folds=summary.get("n_folds", 0),
                mean_itr=summary.get("mean_itr"),
                report_path=report_path,
                config=config or {},
            )
            session.add(run)
            session.commit()
            return run.id
        except SQLAlchemyError as e:
            session.rollback()
            logger.error(f"[Registry] error saving run: {e}")
            return None
        finally:
            session.close()

    def get_eval_runs(self, limit: int = 50) -> List[Dict[str, Any]]:
        """Most recent runs first."""
        session = self.get_session()
        try:
            runs = (
                session.query(EvalRun)
                .order_by(EvalRun.created_at.desc())
                .limit(limit)
                .all()
            )
            return [self._run_dict(r) for r in runs]
        finally:
            session.close()

    def get_run_by_id(self, run_id: str) -> Optional[Dict[str, Any]]:
        session = self.get_session()
        try:
            run = session.query(EvalRun).filter_by(id=run_id).first()
            if run:
                data = self._run_dict(run)
                data["config"] = run.config
                return data
            return None
        finally:
            session.close()

    @staticmethod
    def _run_dict(r: EvalRun) -> Dict[str, Any]:
        return {
            "id": r.id,
            "command": r.command,
            "setting": r.setting,
            "subject": r.subject,
            "condition": r.condition,
            "window_ms": r.window_ms,
            "mean": r.mean_accuracy,
            "std": r.std_accuracy,
            "n_folds": r.n_folds,
            "mean_itr": r.mean_itr,
            "report_path": r.report_path,
            "created_at": _iso(r.created_at),
        }

    def save_artifact(
        self,
        path: str,
        kind: str,
        param_count: Optional[int] = None,
        footprint_bytes: Optional[int] = None,
    ) -> Optional[str]:
        session = self.get_session()
        try:
            artifact = ModelArtifact(
                id=str(uuid4()),
                path=path,
                kind=kind,
                param_count=param_count,
                footprint_bytes=footprint_bytes,
            )
            session.add(artifact)
            session.commit()
            return artifact.id
        except SQLAlchemyError as e:
            session.rollback()
            logger.error(f"[Registry] error saving artifact: {e}")
            return None
        finally:
            session.close()

    def get_artifacts(self, kind: Optional[str] = None, limit: int = 50) -> List[Dict[str, Any]]:
        session = self.get_session()
        try:
            query = session.query(ModelArtifact)
            if kind:
                query = query.filter_by(kind=kind)
            artifacts = query.order_by(ModelArtifact.created_at.desc()).limit(limit).all()
            return [
                {
                    "id": a.id,
                    "path": a.path,
                    "kind": a.kind,
                    "param_count": a.param_count,
                    "footprint_bytes": a.footprint_bytes,
                    "created_at": _iso(a.created_at),
                }
                for a in artifacts
            ]
        finally:
            session.close()

    def get_stats(self) -> Dict[str, Any]:
        """Counts plus the best mean accuracy per setting."""
        session = self.get_session()
        try:
            best = (
                session.query(EvalRun.setting, func.max(EvalRun.mean_accuracy).label("best"))
                .filter(EvalRun.setting.isnot(None))
                .group_by(EvalRun.setting)
                .all()
            )
            return {
                "total_runs": session.query(EvalRun).count(),
                "total_artifacts": session.query(ModelArtifact).count(),
                "best_by_setting": {s: b for s, b in best},
            }
        finally:
            session.close()


_registries: Dict[str, Registry] = {}


def get_registry(db_path: Optional[str] = None) -> Registry:
    """Shared registry for ``db_path`` (default: ``Settings.registry``)."""
    if db_path is None:
        from silentwear.config import get_settings

        db_path = get_settings().registry
    if db_path not in _registries:
        _registries[db_path] = Registry(db_path)
    return _registries[db_path]
