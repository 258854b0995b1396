"""Exceptions that carry structured information about what went wrong."""

from collections.abc import Sequence
from pathlib import Path


class RankDeficiencyError(ValueError):
    """The measurement rows do not determine every sensor cell."""

    def __init__(self, message: str, dependent_rows: Sequence[int]) -> None:
        super().__init__(message)
        self.dependent_rows = tuple(dependent_rows)
        """Indices of a minimal set of linearly dependent rows"""


class DegenerateMeshError(ValueError):
    """The mesher produced triangles with (near) zero area."""

    def __init__(self, message: str, faces: Sequence[int]) -> None:
        super().__init__(message)
        self.faces = tuple(faces)
        """Indices of the offending faces"""


class MalformedCaptureError(ValueError):
    """A capture or trace file does not follow its schema."""

    def __init__(self, message: str, line_numbers: Sequence[int] = ()) -> None:
        super().__init__(message)
        self.line_numbers = tuple(line_numbers)
        """1-based line numbers in the file (the header is line 1)"""


class LayoutMismatchError(ValueError):
    """Two artifacts were produced for different sensor layouts."""

    def __init__(self, expected: str, found: str, what: str) -> None:
        super().__init__(
            f"{what} was built for layout {found[:12]}, expected layout {expected[:12]}"
        )
        self.expected = expected
        self.found = found


class MissingArtifactError(FileNotFoundError):
    """A pipeline stage needs the output of an earlier stage that is not there."""

    def __init__(self, artifact: Path, stage: str) -> None:
        super().__init__(
            f"Missing artifact {artifact}; run 'stretchcap {stage}' first."
        )
        self.artifact = artifact
        self.stage = stage
