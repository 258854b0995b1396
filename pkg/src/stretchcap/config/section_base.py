"""Abstract base class for the sections of the pipeline configuration."""

import sys
from abc import ABC
from dataclasses import is_dataclass
from typing import Any, Optional, cast

from loguru import logger

if sys.version_info >= (3, 11):
    from typing import Self
else:
    from typing_extensions import Self


class ConfigSectionBase(ABC):
    """Base class for all sections of the pipeline configuration.

    A section is a frozen pydantic dataclass; the instance that was set last is kept as a
    singleton per class, so stages can look up their own section with `get()`.
    """

    @classmethod
    def section_name(cls) -> str:
        """Return the class name without the 'Section' suffix, lowercase."""
        return cls.__name__.removesuffix("Section").lower()

    @classmethod
    def get(cls) -> Self:
        """Get the singleton; if not existing, create one with default values."""
        if (the_section := cls._get()) is None:
            cls.get_without_load()
            return cls._create_instance()
        return the_section

    @classmethod
    def get_without_load(cls) -> None:
        """Get has been called on a section before the configuration was loaded."""
        logger.warning(
            f"Config section {cls.__name__} accessed before the configuration has been "
            "loaded; falling back to default values."
        )

    @classmethod
    def set(cls, data: dict[str, Any]) -> Self:
        """Create a new dataclass instance using data and set the singleton."""
        return cls(**data)._set()

    @classmethod
    def _get(cls) -> Optional[Self]:
        """Get the singleton."""
        if the_section := _ALL_SECTION_SINGLETONS.get(id(cls)):
            return cast(Self, the_section)
        return None

    @classmethod
    def _create_instance(
        cls, throw_if_file_not_found: bool = False  # pylint: disable=unused-argument
    ) -> Self:
        """Create a new section with default values."""
        return cls.set({})

    def _set(self) -> Self:
        """Store the singleton, and the singletons of all nested sections."""
        _check_dataclass_decorator(self)
        _ALL_SECTION_SINGLETONS[id(self.__class__)] = self
        for attr in vars(self).values():
            if isinstance(attr, ConfigSectionBase):
                attr._set()  # pylint: disable=protected-access
        return self


def _check_dataclass_decorator(obj: Any) -> None:
    if not is_dataclass(obj):
        raise TypeError(
            f"{obj} is not a dataclass instance; did you forget to add "
            f"'@dataclass(frozen=True)' when you defined {obj.__class__}?"
        )


def reset_sections() -> None:
    """Forget all section singletons (used between CLI invocations and in tests)."""
    _ALL_SECTION_SINGLETONS.clear()


_ALL_SECTION_SINGLETONS: dict[int, ConfigSectionBase] = {}
