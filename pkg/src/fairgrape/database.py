"""Run registry: one row per (config hash, seed) so completed work is not redone"""
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional, Union

from peewee import (CharField, DatabaseProxy, DateTimeField, DoesNotExist, FloatField, IntegerField, Model,
                    SqliteDatabase, TextField)

from .config import Config

logger = logging.getLogger(__name__)

db_proxy = DatabaseProxy()

STATUS_RUNNING = "running"
STATUS_DONE = "done"
STATUS_FAILED = "failed"


class BaseModel(Model):
    class Meta:
        database = db_proxy


class RunRecord(BaseModel):
    config_hash = CharField(index=True, max_length=64)
    seed = IntegerField()
    name = CharField(max_length=200)
    method = CharField(index=True, max_length=20)
    keep_fraction = FloatField()
    status = CharField(index=True, max_length=10)
    manifest_path = CharField(max_length=500)
    diagnostic = TextField(null=True)
    created_utc = DateTimeField()
    updated_utc = DateTimeField()

    class Meta:
        indexes = ((("config_hash", "seed"), True),)


class RunDatabase:
    """Classmethod facade over the registry"""

    _path: Optional[Path] = None

    @classmethod
    def initialize(cls, path: Optional[Union[str, Path]] = None):
        path = Path(path) if path is not None else Config.get_database_path()
        if cls._path == path:
            return
        cls.close()
        path.parent.mkdir(parents=True, exist_ok=True)
        database = SqliteDatabase(str(path), pragmas={"journal_mode": "wal"}, check_same_thread=False)
        db_proxy.initialize(database)
        database.create_tables([RunRecord], safe=True)
        cls._path = path

    @classmethod
    def connect(cls, path: Optional[Union[str, Path]] = None):
        cls.initialize(path)
        if db_proxy.is_closed():
            db_proxy.connect()

    @classmethod
    def close(cls):
        if cls._path is not None and not db_proxy.is_closed():
            db_proxy.close()

    @classmethod
    def get(cls, config_hash: str, seed: int) -> Optional[RunRecord]:
        try:
            return RunRecord.get((RunRecord.config_hash == config_hash) & (RunRecord.seed == seed))
        except DoesNotExist:
            return None

    @classmethod
    def is_done(cls, config_hash: str, seed: int) -> bool:
        record = cls.get(config_hash, seed)
        return record is not None and record.status == STATUS_DONE

    @classmethod
    def record(cls, config_hash: str, seed: int, name: str, method: str, keep_fraction: float,
               status: str, manifest_path: str, diagnostic: Optional[str] = None) -> RunRecord:
        # stored naive, in UTC
        now = datetime.now(timezone.utc).replace(tzinfo=None)
        with db_proxy.atomic():
            record = cls.get(config_hash, seed)
            if record is None:
                record = RunRecord(config_hash=config_hash, seed=seed, created_utc=now)
            record.name = name
            record.method = method
            record.keep_fraction = keep_fraction
            record.status = status
            record.manifest_path = manifest_path
            record.diagnostic = diagnostic
            record.updated_utc = now
            record.save()
        return record

    @classmethod
    def list_runs(cls, method: Optional[str] = None, status: Optional[str] = None) -> List[RunRecord]:
        query = RunRecord.select()
        if method:
            query = query.where(RunRecord.method == method)
        if status:
            query = query.where(RunRecord.status == status)
        return list(query.order_by(RunRecord.updated_utc.desc(), RunRecord.seed))


class DatabaseSession:
    """Context manager for registry access"""

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = path

    def __enter__(self):
        RunDatabase.connect(self.path)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        RunDatabase.close()
