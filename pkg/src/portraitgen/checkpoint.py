"""Checkpoint container: a zip of named ``.npy`` arrays plus a JSON header.

Entries carry a fixed timestamp so equal contents give equal bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointMismatch(ValueError):
    pass


def _entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    return info


def save(path, header: dict, arrays: Dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = dict(header, format_version=FORMAT_VERSION)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        zf.writestr(_entry("header.json"), json.dumps(header, sort_keys=True, indent=1))
        for name in sorted(arrays):
            buf = io.BytesIO()
            arr = np.asarray(arrays[name])
            # ascontiguousarray alone would promote 0-d arrays to shape (1,)
            arr = np.ascontiguousarray(arr).reshape(arr.shape)
            np.lib.format.write_array(buf, arr, allow_pickle=False)
            zf.writestr(_entry(f"arrays/{name}.npy"), buf.getvalue())
    tmp.replace(path)
    return path


def load(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    arrays = {}
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointMismatch(f"unsupported checkpoint version {header.get('format_version')}")
        for name in zf.namelist():
            if name.startswith("arrays/") and name.endswith(".npy"):
                arrays[name[len("arrays/"):-len(".npy")]] = np.lib.format.read_array(
                    io.BytesIO(zf.read(name)), allow_pickle=False)
    return header, arrays


def require_match(header: dict, expected: dict, keys=None):
    """Refuse to proceed when stored and expected config entries differ."""
    for key in keys or expected:
        if header.get(key) != expected.get(key):
            raise CheckpointMismatch(
                f"checkpoint {key}={header.get(key)!r} does not match configured {expected.get(key)!r}")
