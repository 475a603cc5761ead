import os
import json
import datetime
import uuid
import sqlalchemy
from sqlalchemy import Column, Integer, String, Float, DateTime, Text, text
from sqlalchemy.orm import sessionmaker, declarative_base, Session as SQLAlchemySession # Renamed to avoid conflict
from sqlalchemy.exc import SQLAlchemyError, OperationalError, DisconnectionError
import logging
import time
from typing import List, Dict, Any, Optional, Callable

import db_fallback

# Configure logging
logger = logging.getLogger(__name__)
if not logger.handlers:
    handler = logging.StreamHandler()
    formatter = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(module)s - %(message)s')
    handler.setFormatter(formatter)
    logger.addHandler(handler)
    logger.setLevel(os.environ.get("LOG_LEVEL", "INFO").upper())
    logger.propagate = False

# Session factory and engine are created on first use by init_registry()
Session: Optional[sessionmaker] = None
engine: Optional[sqlalchemy.engine.Engine] = None
_initialized = False

Base = declarative_base()


class RunRecord(Base):
    __tablename__ = 'shark_runs'

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(String(36), nullable=False, unique=True, index=True)
    command = Column(String(32), nullable=False, index=True)
    timestamp = Column(DateTime, default=datetime.datetime.utcnow, index=True)
    status = Column(String(32))
    auc = Column(Float)
    logloss = Column(Float)
    memory_ratio = Column(Float)
    wall_time_s = Column(Float)
    report_json = Column(Text, nullable=False)

    def __repr__(self):
        return f"<RunRecord(run_id='{self.run_id}', command='{self.command}', auc={self.auc})>"


def database_url() -> Optional[str]:
    return os.environ.get("SHARK_DATABASE_URL") or os.environ.get("DATABASE_URL")


def _normalize_url(url: str) -> str:
    if url.startswith('postgres://'):
        url = url.replace('postgres://', 'postgresql://', 1)
        logger.info("Converted postgres:// URL to postgresql://")
    return url


def create_db_engine(url: str, max_retries: int = 3) -> Optional[sqlalchemy.engine.Engine]:
    url = _normalize_url(url)
    retry_count = 0
    last_error: Optional[Exception] = None
    while retry_count < max_retries:
        try:
            connect_args = {}
            if 'postgresql' in url:
                connect_args = {"connect_timeout": 10, "application_name": "shark_run_registry"}
            engine_instance = sqlalchemy.create_engine(url, connect_args=connect_args, pool_pre_ping=True)
            # Test connection immediately
            with engine_instance.connect() as conn:
                conn.execute(text("SELECT 1"))
            db_host_info = url.split('@')[-1] if '@' in url else url # Avoid logging credentials
            logger.info(f"Connected to run registry database: {db_host_info}")
            return engine_instance
        except Exception as e:
            last_error = e
            retry_count += 1
            if retry_count < max_retries:
                wait_time = min(2 ** retry_count * 0.5, 5)
                logger.warning(f"Registry connection attempt {retry_count}/{max_retries} failed: {e}. "
                               f"Retrying in {wait_time:.1f} seconds...")
                time.sleep(wait_time)
    logger.error(f"Failed to connect to run registry after {max_retries} attempts. Last error: {last_error}")
    return None


def init_registry(url: Optional[str] = None, max_retries: int = 3) -> bool:
    """Set up the engine and tables. Without a URL every call goes to the in-process fallback."""
    global Session, engine, _initialized
    _initialized = True
    url = url or database_url()
    if not url:
        logger.debug("No database URL configured; using the in-process run registry.")
        engine, Session = None, None
        return False
    engine = create_db_engine(url, max_retries)
    if engine is None:
        logger.warning("Run registry database unavailable; runs are kept in memory only.")
        Session = None
        return False
    try:
        Base.metadata.create_all(engine)
    except SQLAlchemyError as e:
        logger.error(f"Error creating run registry tables: {e}", exc_info=True)
        engine, Session = None, None
        return False
    Session = sessionmaker(autocommit=False, autoflush=False, bind=engine)
    return True


def _ensure_initialized():
    if not _initialized:
        init_registry()


# --- Retry wrapper for database operations ---
def execute_with_retry(operation: Callable, *args: Any, max_retries: int = 2, **kwargs: Any) -> Any:
    retry_count = 0
    last_error: Optional[Exception] = None
    while retry_count < max_retries:
        session: Optional[SQLAlchemySession] = None
        try:
            session = Session()
            result = operation(session, *args, **kwargs)
            session.commit()
            return result
        except (OperationalError, DisconnectionError) as e: # Specific retryable errors
            last_error = e
            retry_count += 1
            logger.warning(f"Registry operation '{operation.__name__}' failed (attempt {retry_count}/{max_retries}): {e}")
            if session:
                session.rollback()
            time.sleep(0.5 * retry_count)
        except SQLAlchemyError as e:
            last_error = e
            logger.error(f"SQLAlchemyError during '{operation.__name__}': {e}", exc_info=True)
            if session:
                session.rollback()
            break
        finally:
            if session:
                session.close()
    logger.error(f"Operation '{operation.__name__}' failed. Last error: {last_error}")
    return None


# --- ORM-based data access functions ---
def _report_columns(report: Dict[str, Any]) -> Dict[str, Any]:
    metrics = report.get("metrics") or {}
    memory = report.get("memory") or {}
    return {
        "command": report.get("command", "unknown"),
        "status": report.get("status"),
        "auc": metrics.get("auc"),
        "logloss": metrics.get("logloss"),
        "memory_ratio": memory.get("ratio"),
        "wall_time_s": report.get("wall_time_s"),
    }


def _save_run_report_impl(session: SQLAlchemySession, run_id: str, report: Dict[str, Any]) -> str:
    session.add(RunRecord(run_id=run_id, report_json=json.dumps(report, default=str), **_report_columns(report)))
    return run_id


def save_run_report(report: Dict[str, Any]) -> str:
    """Store a run report and return its run id. Registry failures never abort a run."""
    _ensure_initialized()
    run_id = report.get("run_id") or str(uuid.uuid4())
    report["run_id"] = run_id
    if Session is None:
        return db_fallback.save_run_report(report)
    saved = execute_with_retry(_save_run_report_impl, run_id, report)
    if saved is None:
        logger.warning(f"Run {run_id} could not be stored in the database; keeping it in memory.")
        return db_fallback.save_run_report(report)
    return saved


def _row_summary(record: RunRecord) -> Dict[str, Any]:
    return {
        "run_id": record.run_id,
        "command": record.command,
        "timestamp": record.timestamp,
        "status": record.status,
        "auc": record.auc,
        "logloss": record.logloss,
        "memory_ratio": record.memory_ratio,
        "wall_time_s": record.wall_time_s,
    }


def _get_recent_runs_impl(session: SQLAlchemySession, limit: int, command: Optional[str]) -> List[Dict[str, Any]]:
    query = session.query(RunRecord)
    if command:
        query = query.filter(RunRecord.command == command)
    return [_row_summary(r) for r in query.order_by(RunRecord.timestamp.desc(), RunRecord.id.desc()).limit(limit).all()]


def get_recent_runs(limit: int = 10, command: Optional[str] = None) -> List[Dict[str, Any]]:
    _ensure_initialized()
    if Session is None:
        return db_fallback.get_recent_runs(limit, command)
    return execute_with_retry(_get_recent_runs_impl, limit, command) or []


def _get_run_report_impl(session: SQLAlchemySession, run_id: str) -> Optional[Dict[str, Any]]:
    record = session.query(RunRecord).filter(RunRecord.run_id == run_id).one_or_none()
    return json.loads(record.report_json) if record else None


def get_run_report(run_id: str) -> Optional[Dict[str, Any]]:
    _ensure_initialized()
    if Session is None:
        return db_fallback.get_run_report(run_id)
    return execute_with_retry(_get_run_report_impl, run_id)


def check_database_health(engine_instance: Optional[sqlalchemy.engine.Engine] = None) -> str:
    """
    Check the health of the registry database connection.
    """
    _ensure_initialized()
    if engine_instance is None:
        engine_instance = engine  # fall back to module-level singleton
    if engine_instance is None:
        return "Not Configured"
    try:
        with engine_instance.connect() as conn:
            conn.execute(text("SELECT 1"))
        return "OK"
    except Exception as e:
        logger.error(f"Database health check failed: {e}", exc_info=True)
        return "Error"
