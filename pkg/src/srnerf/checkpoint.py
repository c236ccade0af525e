"""Single-file checkpoint archives.

An archive is an uncompressed ``.npz`` holding named parameter arrays plus
one JSON header stored under ``__header__``. The header always carries
``format_version`` and ``kind``; everything else is owner-defined. Entries
carry a fixed timestamp, so equal contents give byte-identical files.
"""
from __future__ import annotations

import json
import os
import tempfile
import zipfile
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
_HEADER_KEY = "__header__"
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(RuntimeError):
    pass


def save_archive(path, arrays: dict, header: dict) -> Path:
    """Write atomically: a failed write leaves any previous file intact."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {"format_version": FORMAT_VERSION, **header}
    payload = {k: np.ascontiguousarray(v) for k, v in arrays.items()}
    if _HEADER_KEY in payload:
        raise CheckpointError(f"array name {_HEADER_KEY!r} is reserved")
    payload[_HEADER_KEY] = np.frombuffer(
        json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh, zipfile.ZipFile(fh, "w", zipfile.ZIP_STORED, allowZip64=True) as zf:
            for name in sorted(payload):
                info = zipfile.ZipInfo(name + ".npy", date_time=_ZIP_EPOCH)
                with zf.open(info, "w", force_zip64=True) as entry:
                    np.lib.format.write_array(entry, payload[name], allow_pickle=False)
        os.replace(tmp, path)
    except OSError as exc:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise CheckpointError(f"could not write checkpoint {path}: {exc}") from exc
    return path


def load_archive(path, kind: str | None = None):
    """Return ``(arrays, header)``; validates version and optionally kind."""
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        if _HEADER_KEY not in data.files:
            raise CheckpointError(f"{path} has no header")
        header = json.loads(bytes(data[_HEADER_KEY]).decode("utf-8"))
        arrays = {k: data[k] for k in data.files if k != _HEADER_KEY}
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version} is not supported (expected {FORMAT_VERSION})"
        )
    if kind is not None and header.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {header.get('kind')!r}")
    return arrays, header


def state_to_numpy(module, prefix: str = "") -> dict:
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
