import csv
import json
import logging
import os
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from sqlalchemy import create_engine
from sqlalchemy.engine.base import Engine
from sqlalchemy.orm import sessionmaker
from sqlalchemy.orm.decl_api import DeclarativeMeta
from sqlalchemy.orm.session import Session

logger = logging.getLogger('database')


class DataBaseType(Enum):
    DATABASE = 'DATABASE' # init_database(database_type=DataBaseType.DATABASE, name='metrics', fields=MetricsTable)
    JSON = 'JSON' # init_database(database_type=DataBaseType.JSON, name='manifest')
    CSV = 'CSV' # init_database(database_type=DataBaseType.CSV, name='metrics', fields=['model', 'miou'])


class DatabaseUtil:
    def __init__(self, table: DeclarativeMeta, file_path: str = ''):
        self.extension = '.sqlite3'
        self.table = table
        self.file_path = file_path

        Path(self.file_path + self.extension).touch()
        self.engine: Engine = create_engine('sqlite:///{}'.format(self.file_path + self.extension))
        self.table.metadata.create_all(self.engine)

    @property
    def path(self) -> str:
        return self.file_path + self.extension

    @property
    def session(self) -> Session:
        Session = sessionmaker(bind=self.engine)
        return Session()

    def save(self, data: List[Dict[str, Any]]):
        session = self.session
        try:
            session.bulk_insert_mappings(self.table, data)
            session.commit()
        except Exception as error:
            session.rollback()
            logger.error(error)
            raise
        finally:
            session.close()

    def load(self) -> List[Dict[str, Any]]:
        session = self.session
        try:
            columns = [column.name for column in self.table.__table__.columns]
            return [
                {column: getattr(row, column) for column in columns}
                for row in session.query(self.table).order_by(self.table.id)
            ]
        finally:
            session.close()


class JsonUtil:
    def __init__(self, file_path: str = ''):
        self.extension = '.json'
        self.file_path = file_path

    @property
    def path(self) -> str:
        return self.file_path + self.extension

    def save(self, data: Union[List[Any], Dict[str, Any]]):
        """Lists extend the stored list; a dict replaces the stored document."""
        origin_data: Union[List[Any], Dict[str, Any]] = data
        if isinstance(data, list):
            try:
                with open(self.path, 'r', encoding='utf-8') as json_file:
                    origin_data = json.load(json_file) + data
            except FileNotFoundError:
                pass

        tmp_path = self.file_path + '_tmp' + self.extension
        with open(tmp_path, 'w', encoding='utf-8') as json_file:
            json.dump(origin_data, json_file, ensure_ascii=False, indent=2, sort_keys=isinstance(origin_data, dict))
        os.replace(tmp_path, self.path)

    def load(self) -> Union[List[Any], Dict[str, Any]]:
        with open(self.path, 'r', encoding='utf-8') as json_file:
            return json.load(json_file)


class CsvUtil:
    def __init__(self, file_path: str = '', field_names: Optional[List[str]] = None):
        self.extension = '.csv'
        self.file_path = file_path
        self.field_names = list(field_names or [])

    @property
    def path(self) -> str:
        return self.file_path + self.extension

    def save(self, data: List[Dict[str, Any]]):
        origin_data = []
        try:
            with open(self.path, 'r', newline='') as csv_file:
                origin_data = list(csv.DictReader(csv_file))
        except FileNotFoundError:
            pass

        tmp_path = self.file_path + '_tmp' + self.extension
        with open(tmp_path, 'w', newline='') as csv_file:
            origin_data.extend(data)
            writer = csv.DictWriter(csv_file, fieldnames=self.field_names, lineterminator='\n')
            writer.writeheader()
            writer.writerows(origin_data)
        os.replace(tmp_path, self.path)

    def load(self) -> List[Dict[str, str]]:
        with open(self.path, 'r', newline='') as csv_file:
            return list(csv.DictReader(csv_file))


def init_database(
        name: str,
        database_type: DataBaseType,
        path: str = '',
        fields: Union[DeclarativeMeta, List[str], None] = None,
        overwrite: bool = True,
    ) -> Union[DatabaseUtil, JsonUtil, CsvUtil]:
    """Store for ``<path>/<name>``; ``overwrite`` removes a previous run's file."""
    if not path:
        path = os.path.join(os.getcwd(), 'data')
    os.makedirs(path, exist_ok=True)
    file_path = os.path.join(path, name)

    if database_type is DataBaseType.DATABASE and fields is not None and not isinstance(fields, list):
        if overwrite:
            Path(file_path + '.sqlite3').unlink(missing_ok=True)
        return DatabaseUtil(table=fields, file_path=file_path)
    elif database_type is DataBaseType.JSON and fields is None:
        database = JsonUtil(file_path=file_path)
    elif database_type is DataBaseType.CSV and isinstance(fields, list):
        database = CsvUtil(file_path=file_path, field_names=fields)
    else:
        raise ValueError(f'fields {fields!r} do not fit database type {database_type.value}')

    if overwrite and isinstance(database, (JsonUtil, CsvUtil)):
        Path(database.path).unlink(missing_ok=True)
    return database
