"""Small file helpers: atomic writes and versioned JSON documents."""

from __future__ import annotations

import json
import os
import tempfile

FORMAT_VERSION = 1


def atomic_write_text(path, text: str):
    """Write text to ``path`` via a temporary file and rename.

    Readers never observe a half-written artifact; on failure the original
    file (if any) is left untouched.
    """
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def write_json(path, doc: dict):
    atomic_write_text(path, json.dumps(doc, indent=1, sort_keys=True))


def read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
