"""Deterministic array archives.

Every persisted artifact (graph sets, datasets, checkpoints) is a zip file
holding ``manifest.json`` plus one ``.npy`` member per array.  Members are
written in sorted order with a fixed timestamp so identical inputs give
byte-identical files.  The manifest carries a SHA-256 digest over its own
body and every array, so reordered node lists or swapped matrices are
rejected on load rather than silently misaligned.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np

_EPOCH = (1980, 1, 1, 0, 0, 0)


class ArchiveError(ValueError):
    """Malformed, truncated, or mismatched archive."""


def _digest(body: dict, arrays: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(body, sort_keys=True).encode())
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(repr(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def write_archive(path, kind: str, version: int, body: dict, arrays: dict[str, np.ndarray]) -> None:
    manifest = {"format": kind, "version": version, "body": body}
    manifest["digest"] = _digest(manifest["body"], arrays)
    path = Path(path)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("manifest.json", date_time=_EPOCH)
        zf.writestr(info, json.dumps(manifest, sort_keys=True, indent=1))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=_EPOCH), buf.getvalue())


def read_archive(path, kind: str, version: int) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        with zipfile.ZipFile(path, "r") as zf:
            manifest = json.loads(zf.read("manifest.json"))
            arrays = {}
            for member in zf.namelist():
                if member == "manifest.json":
                    continue
                if not member.endswith(".npy"):
                    raise ArchiveError(f"{path}: unexpected member {member!r}")
                arrays[member[:-4]] = np.lib.format.read_array(
                    io.BytesIO(zf.read(member)), allow_pickle=False
                )
    except ArchiveError:
        raise
    except (zipfile.BadZipFile, KeyError, ValueError, OSError, EOFError) as exc:
        raise ArchiveError(f"{path}: cannot parse archive ({exc})") from exc

    if manifest.get("format") != kind:
        raise ArchiveError(f"{path}: expected a {kind!r} archive, found {manifest.get('format')!r}")
    if manifest.get("version") != version:
        raise ArchiveError(
            f"{path}: format version {manifest.get('version')!r} unsupported (expected {version})"
        )
    body = manifest.get("body")
    if not isinstance(body, dict) or _digest(body, arrays) != manifest.get("digest"):
        raise ArchiveError(f"{path}: digest mismatch, archive contents were altered")
    return body, arrays
