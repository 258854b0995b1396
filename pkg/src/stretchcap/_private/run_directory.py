"""Guard a run directory against concurrent writers."""

import os
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path

from loguru import logger

LOCK_FILENAME = ".stretchcap.lock"


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def _try_acquire(lock_path: Path) -> bool:
    """Create lock_path holding our pid; the file never exists without its content"""
    staged = lock_path.with_name(f"{lock_path.name}.{os.getpid()}")
    staged.write_text(str(os.getpid()), encoding="utf-8")
    try:
        os.link(staged, lock_path)
    except FileExistsError:
        return False
    finally:
        staged.unlink(missing_ok=True)
    return True


@contextmanager
def run_directory_lock(run_dir: Path) -> Iterator[Path]:
    """Hold the lock file of run_dir for the duration of the block.

    Raises:
        RuntimeError: if another live process holds the lock
    """
    run_dir.mkdir(parents=True, exist_ok=True)
    lock_path = run_dir / LOCK_FILENAME
    if not _try_acquire(lock_path):
        owner = lock_path.read_text(encoding="utf-8").strip()
        if owner.isdigit() and _pid_alive(int(owner)) and int(owner) != os.getpid():
            raise RuntimeError(f"Run directory {run_dir} is locked by process {owner}.")
        logger.warning(f"Taking over stale lock {lock_path} (owner {owner or '?'}).")
        lock_path.unlink(missing_ok=True)
        if not _try_acquire(lock_path):
            raise RuntimeError(f"Run directory {run_dir} was locked by another process meanwhile.")
    try:
        yield run_dir
    finally:
        lock_path.unlink(missing_ok=True)
