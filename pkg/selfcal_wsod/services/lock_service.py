"""
SELFCAL-WSOD: Lock Service
===========================
One writer per output directory. A `.lock` file is created exclusively on entry
and removed on exit; a second writer fails fast with LockError instead of
interleaving files in the same store or checkpoint directory.

Usage:
    with directory_lock(store_dir):
        generate_pseudo_labels(...)
"""
import logging
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator

from selfcal_wsod.core.errors import LockError

logger = logging.getLogger(__name__)

LOCK_FILE = ".lock"


@contextmanager
def directory_lock(directory: str | Path) -> Iterator[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock_path = directory / LOCK_FILE
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        owner = lock_path.read_text(encoding="utf-8").strip() if lock_path.is_file() else "?"
        raise LockError(
            f"{directory} is in use by another run (pid {owner}); remove {lock_path} if that run is gone",
            code="LOCKED",
        )
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(str(os.getpid()))
    logger.debug(f"Lock acquired: {lock_path}")
    try:
        yield directory
    finally:
        lock_path.unlink(missing_ok=True)
        logger.debug(f"Lock released: {lock_path}")
