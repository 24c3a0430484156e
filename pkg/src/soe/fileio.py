"""Small helpers shared by the binary and text writers."""
from __future__ import annotations

import os
import tempfile
from pathlib import Path


class FormatError(ValueError):
    """A file does not match the expected binary layout."""


def atomic_write(path, payload: bytes | str) -> None:
    """Write ``payload`` to a temporary sibling, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(payload, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8"})) as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class Reader:
    """Cursor over a byte buffer that raises :class:`FormatError` on truncation."""

    def __init__(self, buf: bytes, what: str = "file"):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError(f"truncated {self.what}: wanted {n} bytes at offset {self.pos}, "
                              f"only {len(self.buf) - self.pos} left")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def done(self) -> bool:
        return self.pos == len(self.buf)
