"""Shared file helpers.

Centralised so that every artifact (config echo, dumps, tables, SVGs)
is written the same way:

* write to ``<file>.tmp``, ``fsync``, then ``os.replace``; a crash
  mid-write never leaves a truncated result next to good ones,
* one consistent ``(ok, message)`` return shape for the non-raising
  variant.
"""
from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Tuple, Union

log = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except OSError:
        try:
            os.remove(tmp)
        except OSError:
            pass
        raise
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    # newline="" semantics: text is written exactly as given.
    return atomic_write_bytes(path, text.encode("utf-8"))


def try_write_text(path: PathLike, text: str) -> Tuple[bool, str]:
    """Non-raising variant for best-effort artifacts."""
    try:
        atomic_write_text(path, text)
        return True, str(path)
    except OSError as exc:
        log.error("Atomic write of %s failed: %s", path, exc)
        return False, str(exc)
