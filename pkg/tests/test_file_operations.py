# pylint: disable=missing-module-docstring
# pylint: disable=missing-function-docstring
import os
from pathlib import Path

import pytest

from stretchcap._private.file_operations_utils import (
    atomic_open,
    atomic_write_text,
    deep_update,
    sha256_of_data,
    sha256_of_file,
)
from stretchcap._private.run_directory import LOCK_FILENAME, run_directory_lock


def test_deep_update() -> None:
    base = {"a": 1, "training": {"epochs": 3, "seed": 0}}
    updated = deep_update(base, {"training": {"epochs": 9}}, {"b": 2})
    assert updated == {"a": 1, "b": 2, "training": {"epochs": 9, "seed": 0}}
    assert base["training"]["epochs"] == 3


def test_atomic_write_keeps_old_content_on_failure(tmp_path: Path) -> None:
    path = tmp_path / "nested" / "file.txt"
    atomic_write_text(path, "old")
    with pytest.raises(RuntimeError):
        with atomic_open(path) as fptr:
            fptr.write("new")
            raise RuntimeError("interrupted")
    assert path.read_text(encoding="utf-8") == "old"
    assert [p.name for p in path.parent.iterdir()] == ["file.txt"]


def test_hashes(tmp_path: Path) -> None:
    assert sha256_of_data({"b": 1, "a": [1, 2]}) == sha256_of_data({"a": [1, 2], "b": 1})
    assert sha256_of_data({"a": 1}) != sha256_of_data({"a": 2})
    path = tmp_path / "data.txt"
    atomic_write_text(path, "abc")
    assert sha256_of_file(path) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


def test_run_directory_lock(tmp_path: Path) -> None:
    run_dir = tmp_path / "run"
    with run_directory_lock(run_dir):
        assert (run_dir / LOCK_FILENAME).read_text(encoding="utf-8") == str(os.getpid())
    assert not (run_dir / LOCK_FILENAME).exists()


def test_stale_lock_is_taken_over(tmp_path: Path) -> None:
    tmp_path.joinpath(LOCK_FILENAME).write_text("", encoding="utf-8")
    with run_directory_lock(tmp_path):
        assert (tmp_path / LOCK_FILENAME).is_file()
    assert not (tmp_path / LOCK_FILENAME).exists()


def test_lock_file_is_created_with_its_owner(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    seen = []
    link = os.link

    def checked_link(source: Path, target: Path) -> None:
        seen.append(Path(source).read_text(encoding="utf-8"))
        link(source, target)

    monkeypatch.setattr(os, "link", checked_link)
    with run_directory_lock(tmp_path):
        assert [p.name for p in tmp_path.iterdir()] == [LOCK_FILENAME]
    assert seen == [str(os.getpid())]


def test_live_lock_is_refused(tmp_path: Path) -> None:
    tmp_path.joinpath(LOCK_FILENAME).write_text(str(os.getppid()), encoding="utf-8")
    with pytest.raises(RuntimeError, match="locked by process"):
        with run_directory_lock(tmp_path):
            pass
    assert tmp_path.joinpath(LOCK_FILENAME).read_text(encoding="utf-8") == str(os.getppid())
    assert [p.name for p in tmp_path.iterdir()] == [LOCK_FILENAME]
