"""CSV formatting shared by every writer: 9 significant digits, LF endings."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path


def fmt(v) -> str:
    if isinstance(v, (bool,)):
        return "1" if v else "0"
    if isinstance(v, int):
        return str(v)
    s = format(float(v), ".9g")
    return "0" if s == "-0" else s


def format_row(values) -> str:
    return ",".join(fmt(v) for v in values) + "\n"


def comment_block(items) -> str:
    return "".join(f"# {k} = {v}\n" for k, v in items)


def atomic_write(path, text: str) -> Path:
    """Write ``text`` to ``path`` via a temporary file and rename, so no partial file survives."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path
