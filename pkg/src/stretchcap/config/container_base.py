"""Base class for the root section of the pipeline configuration, which handles files."""

import sys
from abc import ABC
from pathlib import Path
from typing import Any, Optional

from loguru import logger
from pathvalidate import is_valid_filepath
from pydantic import TypeAdapter

from stretchcap._private.file_operations import FileFormat
from stretchcap._private.file_operations import load as _do_load
from stretchcap._private.file_operations import save as _do_save
from stretchcap._private.file_operations_utils import deep_update
from stretchcap.config.section_base import ConfigSectionBase
from stretchcap.type_notation_helper import PathOrStr

if sys.version_info >= (3, 11):
    from typing import Self
else:
    from typing_extensions import Self


class ConfigContainerBase(ConfigSectionBase, ABC):
    """Base class for a configuration container: a root section that is read from file."""

    @classmethod
    def default_file_format(cls) -> FileFormat:
        """Return the default file format"""
        return FileFormat.JSON

    @classmethod
    def default_filename(cls) -> str:
        """Return 'config' with the extension that fits the file format."""
        return f"config.{cls.default_file_format().value}"

    @classmethod
    def default_filepath(cls) -> Optional[Path]:
        """Return the path of a config file in the current working directory, if there is one."""
        candidate = Path.cwd() / "stretchcap.json"
        return candidate if candidate.is_file() else None

    @classmethod
    def set_filepath(cls, file_path: PathOrStr = "", load: bool = False) -> None:
        """Set the path for the config file (a singleton).

        Raises:
            ValueError: if file_path is not a valid path for the OS running the code
        """
        path: Optional[Path] = None
        if isinstance(file_path, Path):
            path = file_path.resolve()
        elif file_path:
            if is_valid_filepath(file_path, platform="auto"):
                path = Path(file_path).resolve()
            else:
                raise ValueError(
                    f"Given path: '{file_path}' is not a valid path for this OS"
                )

        if path:
            _ALL_PATHS[id(cls)] = path
        else:
            _ALL_PATHS.pop(id(cls), None)

        if load:
            cls.load()
        elif cls._get() is not None:
            logger.info("Config filepath has been set but the file is not loaded yet.")

    @classmethod
    def filepath(cls) -> Optional[Path]:
        """Return the path for the file that holds the configuration."""
        return _ALL_PATHS.get(id(cls), cls.default_filepath())

    @classmethod
    def load(
        cls,
        throw_if_file_not_found: bool = False,
        overrides: Optional[dict[str, Any]] = None,
    ) -> Self:
        """Create a new singleton from the config file, with overrides applied on top.

        Raises:
            FileNotFoundError: if throw_if_file_not_found == True and filepath() cannot be resolved
            TOMLDecodeError: if the file is toml and not a valid toml document
            JSONDecodeError: if the file is json and not a valid json document
            ValidationError: if a value cannot be coerced into the specified parameter type
            ValueError: if included files form a cycle
        """
        data_stored = cls._get_saved_data(throw_if_file_not_found)
        if overrides:
            data_stored = deep_update(data_stored, overrides)
        return cls.set(data_stored)

    @classmethod
    def get_without_load(cls) -> None:
        """Get has been called before a load was done; handle this."""
        logger.warning(
            f"{cls.__name__} accessed before data has been loaded; "
            f"will try implicit loading with {cls.filepath()}."
        )

    @classmethod
    def _create_instance(cls, throw_if_file_not_found: bool = False) -> Self:
        return cls.load(throw_if_file_not_found)

    def save(self, path: Optional[Path] = None) -> Path:
        """Save the configuration, e.g. as a record of the parameters of a run.

        Raises:
            RuntimeError: if no path is given and filepath() == None
        """
        if (target := path or self.filepath()) is None:
            raise RuntimeError("No path specified for the config file, cannot be saved.")
        target.parent.mkdir(parents=True, exist_ok=True)
        # enums and tuples are stored in their JSON form
        _do_save(target, TypeAdapter(type(self)).dump_python(self, mode="json"))
        return target

    @classmethod
    def _get_saved_data(cls, throw_if_file_not_found: bool = False) -> dict[str, Any]:
        """Get the data stored in the config file"""
        return _do_load(cls.filepath(), throw_if_file_not_found)


_ALL_PATHS: dict[int, Path] = {}
