"""Shared file-format plumbing: atomic writes and format errors."""

from __future__ import annotations

import os
import tempfile


class FormatError(ValueError):
    """Malformed binary or JSON artifact; ``offset`` is the failing byte, if known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def atomic_write_bytes(path, data: bytes):
    """Write via a temp file in the same directory, then rename into place."""
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))
