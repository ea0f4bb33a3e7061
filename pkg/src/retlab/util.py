"""Shared helpers: atomic file writes, stable seed derivation, hashing."""

from __future__ import annotations

import hashlib
import os
import tempfile


def atomic_write_bytes(path, payload: bytes) -> None:
    """Write to a temp file in the target directory, then rename into place.

    A failed command therefore never leaves a partial output file behind,
    and an existing file survives until the replacement is complete.
    """
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def derive_seed(master_seed: int, stage: str) -> int:
    """Stable per-stage sub-seed from the single manifest seed."""
    digest = hashlib.sha256(f"{master_seed}:{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % (2**63)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
