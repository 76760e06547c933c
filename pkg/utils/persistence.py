"""Artifact persistence: atomic writes, JSONL records and CSV tables."""

import csv
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Union

import numpy as np

from core.exceptions import DataIOError, ManifestError

PathLike = Union[str, Path]


def atomic_write_bytes(path: PathLike, payload: bytes) -> Path:
    """Write ``payload`` to a temp file beside ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp_name, path)
    except OSError as e:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise DataIOError(f"could not write {path}: {e}", error_code="WRITE_FAILED") from e
    return path


def dumps_record(record: Dict[str, Any]) -> str:
    """Canonical single-line JSON (sorted keys, fixed separators)."""
    return json.dumps(record, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_jsonl(path: PathLike, records: Iterable[Dict[str, Any]]) -> Path:
    text = "".join(dumps_record(r) + "\n" for r in records)
    return atomic_write_bytes(path, text.encode("utf-8"))


def read_jsonl(path: PathLike) -> List[Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"missing file: {path}", error_code="NOT_FOUND", details={"path": str(path)})
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{line_no}: invalid JSON ({e.msg})", error_code="BAD_JSONL") from e
    return records


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_format_cell(v) for v in row])
    return atomic_write_bytes(path, buffer.getvalue().encode("utf-8"))


def read_csv(path: PathLike) -> List[Dict[str, str]]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def _format_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


class ArtifactStore:
    """Output-directory layout for one pipeline run."""

    def __init__(self, root: PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

        self.data_dir = self.root / "data"
        self.checkpoints_dir = self.root / "checkpoints"
        self.translated_dir = self.root / "translated"
        self.metrics_dir = self.root / "metrics"
        self.logs_dir = self.root / "logs"

        self.manifest_file = self.data_dir / "manifest.jsonl"
        self.translated_manifest_file = self.translated_dir / "manifest.jsonl"

    def checkpoint(self, name: str) -> Path:
        return self.checkpoints_dir / f"{name}.rplk"

    def metrics(self, name: str) -> Path:
        return self.metrics_dir / name

    def require(self, path: PathLike) -> Path:
        """Return ``path`` if it exists, else raise an actionable error."""
        path = Path(path)
        if not path.exists():
            raise DataIOError(
                f"required input {path} does not exist; run the producing command first",
                error_code="MISSING_INPUT",
                details={"path": str(path)},
            )
        return path
