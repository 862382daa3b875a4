import json
import logging
import os
import time

from utils.errors import FormatError, MissingArtifactError
from utils.json_helpers import dumps

logger = logging.getLogger(__name__)


class RunLog:
    """Append-only JSON-lines log; every record gets a wall-clock timestamp"""

    def __init__(self, path):
        self.path = path
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self._file = open(path, 'a', encoding='utf-8')

    def write(self, record):
        entry = {'time': time.time()}
        entry.update(record)
        self._file.write(dumps(entry) + '\n')
        self._file.flush()

    __call__ = write

    def close(self):
        if not self._file.closed:
            self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()
        return False


class RunLogRepository:
    """JSON-lines run logs and JSON reports"""

    @staticmethod
    def open(path) -> RunLog:
        return RunLog(path)

    @staticmethod
    def read(path):
        if not os.path.exists(path):
            raise MissingArtifactError('run log', path)
        records = []
        with open(path, encoding='utf-8') as f:
            for number, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise FormatError(f"{path}:{number}: invalid JSON line") from e
        return records

    @staticmethod
    def write_report(path, report):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            f.write(dumps(report, indent=2))
        logger.info("Wrote report %s", path)
        return path

    @staticmethod
    def read_report(path):
        if not os.path.exists(path):
            raise MissingArtifactError('report', path)
        try:
            with open(path, encoding='utf-8') as f:
                return json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}: invalid JSON report") from e
