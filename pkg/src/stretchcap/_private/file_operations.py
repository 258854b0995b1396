"""Functions for storing dicts to and loading dicts from config files."""

from collections.abc import Callable
from enum import Enum, unique
from pathlib import Path
from typing import Any, Optional, cast

from loguru import logger
from pathvalidate import is_valid_filepath

from stretchcap._private.json_file_operations import load_json, save_json
from stretchcap._private.toml_file_operations import load_toml, save_toml


@unique
class FileFormat(Enum):
    """File formats that are supported for configuration files"""

    TOML = "toml"
    JSON = "json"


INCLUDE_KEY = "__include__"


def _check_filepath(
    path: Optional[Path],
    throw_if_invalid_path: bool,
    throw_if_file_not_found: bool,
) -> bool:
    """Log an error and/or throw if path cannot be loaded and return a bool whether it can"""
    if not path:
        err_mess = f"Path {str(path)} not valid."
        if throw_if_invalid_path:
            raise FileNotFoundError(err_mess)
        logger.debug(err_mess)
        return False
    ext = path.suffix[1:].lower()
    try:
        FileFormat(ext)
    except ValueError:
        logger.error(f"Unknown file format {ext} given in {path}.")
        return False
    if not path.is_file():
        mess = f"Path {str(path)} is not a file."
        if throw_if_file_not_found:
            raise FileNotFoundError(mess)
        logger.warning(mess)
        return False
    return True


def load(path: Optional[Path], throw_if_file_not_found: bool) -> dict[str, Any]:
    """Load data from the file given in path, resolving includes; log error or throw if not possible"""
    if _check_filepath(
        path,
        throw_if_invalid_path=throw_if_file_not_found,
        throw_if_file_not_found=throw_if_file_not_found,
    ):
        real_path = cast(Path, path)
        if loader := _get_loader(path=real_path):
            return _load_with_includes(real_path, throw_if_file_not_found, loader)
    logger.info("No config file loaded; using default values.")
    return {}


def save(path: Path, data: dict[str, Any]) -> None:
    """Save data to the file given in path, replacing any previous content"""
    if not is_valid_filepath(str(path), platform="auto"):
        raise ValueError(f"Given path: '{path}' is not a valid path for this OS")
    if saver := _get_saver(path=path):
        saver(path, data)
    else:
        raise ValueError(f"Unknown file format {path.suffix} given in {path}.")


def _get_loader(path: Path) -> Optional[Callable[[Path], dict[str, Any]]]:
    """Return the loader to be used for the file extension"""
    ext = path.suffix[1:].lower()
    if ext == FileFormat.JSON.value:
        return load_json
    if ext == FileFormat.TOML.value:
        return load_toml
    return None


def _load_with_includes(
    path: Path,
    throw_if_file_not_found: bool,
    loader: Callable[[Path], dict[str, Any]],
    chain: tuple[Path, ...] = (),
) -> dict[str, Any]:
    resolved = path.resolve()
    if resolved in chain:
        cycle = " -> ".join(str(p) for p in (*chain, resolved))
        raise ValueError(f"Config files include each other: {cycle}")
    data_stored = loader(path)
    if included_files := data_stored.pop(INCLUDE_KEY, None):
        if not isinstance(included_files, list):
            included_files = [included_files]
        for included_file in included_files:
            if not isinstance(included_file, str) or not is_valid_filepath(
                included_file, platform="auto"
            ):
                raise ValueError(
                    f"Given path: '{included_file}' is not a valid path for this OS"
                )
            included_file_path = Path(included_file)
            if not included_file_path.is_absolute():
                included_file_path = path.parent / included_file_path
            if _check_filepath(
                included_file_path,
                throw_if_invalid_path=throw_if_file_not_found,
                throw_if_file_not_found=throw_if_file_not_found,
            ):
                # the including file wins
                included_loader = _get_loader(included_file_path) or loader
                data_stored = (
                    _load_with_includes(
                        included_file_path,
                        throw_if_file_not_found,
                        included_loader,
                        (*chain, resolved),
                    )
                    | data_stored
                )
    return data_stored


def _get_saver(path: Path) -> Optional[Callable[[Path, dict[str, Any]], None]]:
    """Return the saver to be used for the file extension"""
    ext = path.suffix[1:].lower()
    if ext == FileFormat.JSON.value:
        return save_json
    if ext == FileFormat.TOML.value:
        return save_toml
    return None
