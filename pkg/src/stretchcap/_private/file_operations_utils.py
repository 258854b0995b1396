"""Utilities for file operations: nested updates, atomic writes and canonical hashes."""

import hashlib
import json
import os
import tempfile
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import IO, Any


def deep_update(
    mapping: dict[str, Any], *updating_mappings: dict[str, Any]
) -> dict[str, Any]:
    """Update a nested dictionary or similar mapping."""
    updated_mapping = mapping.copy()
    for updating_mapping in updating_mappings:
        for k, v in updating_mapping.items():
            if (
                k in updated_mapping
                and isinstance(updated_mapping[k], dict)
                and isinstance(v, dict)
            ):
                updated_mapping[k] = deep_update(updated_mapping[k], v)
            else:
                updated_mapping[k] = v
    return updated_mapping


@contextmanager
def atomic_open(path: Path, mode: str = "w") -> Iterator[IO[Any]]:
    """Open a temporary file next to path; it replaces path only when the block succeeds."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    tmp_path = Path(tmp_name)
    try:
        with os.fdopen(fd, mode) as fptr:
            yield fptr
        os.replace(tmp_path, path)
    except BaseException:
        tmp_path.unlink(missing_ok=True)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    """Write text to path atomically."""
    with atomic_open(path, "w") as fptr:
        fptr.write(text)


def canonical_json(data: Any) -> str:
    """Serialize data with sorted keys and no insignificant whitespace."""
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha256_of_data(data: Any) -> str:
    """Return the hex SHA-256 of the canonical JSON form of data."""
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()


def sha256_of_file(path: Path) -> str:
    """Return the hex SHA-256 of the bytes of a file."""
    digest = hashlib.sha256()
    with path.open("rb") as fptr:
        for chunk in iter(lambda: fptr.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()
