"""Functions for storing dicts to and loading dicts from toml files."""

from pathlib import Path
from typing import Any

import tomlkit
from loguru import logger

from stretchcap._private.file_operations_utils import atomic_write_text


def load_toml(path: Path) -> dict[str, Any]:
    """Load the info in the toml file given by path and return as dict"""
    data_stored: dict[str, Any] = {}
    if path.stat().st_size > 0:
        with path.open(mode="r", encoding="utf-8") as fptr:
            data_stored = tomlkit.load(fptr).unwrap()
    else:
        logger.warning(f"File {path} is empty.")
    return data_stored


def save_toml(path: Path, data: dict[str, Any]) -> None:
    """Write data to the toml file given by path; None values are left out"""
    atomic_write_text(path, tomlkit.dumps(_drop_none(data)))


def _drop_none(data: dict[str, Any]) -> dict[str, Any]:
    # toml has no null and tomlkit wants lists rather than tuples
    return {
        k: _drop_none(v) if isinstance(v, dict) else _listify(v)
        for k, v in data.items()
        if v is not None
    }


def _listify(value: Any) -> Any:
    if isinstance(value, (list, tuple)):
        return [_listify(v) for v in value]
    return value
