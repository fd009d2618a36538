import json
from typing import Iterable, List

from pydantic import BaseModel

from utils import atomic_write


def to_json_lines(records: Iterable[BaseModel]) -> str:
    return "".join(json.dumps(json.loads(r.json()), sort_keys=True) + "\n" for r in records)


class TraceWriter:
    """Collects per-step records and writes them as JSON-lines in one atomic rename.

    Leaving the context flushes whatever was recorded, so an aborted run
    keeps the steps it completed.
    """

    def __init__(self, path: str):
        self.path = path
        self.records: List[BaseModel] = []

    def write(self, record: BaseModel) -> None:
        self.records.append(record)

    def close(self) -> None:
        atomic_write(self.path, to_json_lines(self.records))

    def __enter__(self) -> "TraceWriter":
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()
