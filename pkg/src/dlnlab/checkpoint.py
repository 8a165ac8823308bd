"""Checkpoint container: one flat little-endian float64 blob plus a text manifest.

Layout of a checkpoint directory::

    manifest.txt   first line "dlnlab-checkpoint 1", second line "meta <json>",
                   then one "name<TAB>float64<TAB>d0,d1,...<TAB>offset<TAB>count"
                   line per array (offset and count in elements)
    params.bin     the arrays, concatenated in manifest order
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from dlnlab.exceptions import DlnLabError

MAGIC = "dlnlab-checkpoint 1"
_DT = np.dtype("<f8")


class CheckpointError(DlnLabError, IOError):
    pass


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [MAGIC, "meta " + json.dumps(meta or {}, sort_keys=True)]
    offset = 0
    with open(path / "params.bin", "wb") as fh:
        for name, arr in arrays.items():
            if "\t" in name or "\n" in name:
                raise CheckpointError(f"invalid array name {name!r}")
            arr = np.asarray(arr, dtype=_DT)
            fh.write(arr.tobytes())
            dims = ",".join(str(d) for d in arr.shape)
            lines.append(f"{name}\tfloat64\t{dims}\t{offset}\t{arr.size}")
            offset += arr.size
    (path / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        lines = (path / "manifest.txt").read_text(encoding="utf-8").splitlines()
        blob = np.fromfile(path / "params.bin", dtype=_DT)
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing checkpoint file: {exc.filename}") from None
    if not lines or lines[0] != MAGIC or not lines[1].startswith("meta "):
        raise CheckpointError(f"{path}: not a dlnlab checkpoint")
    meta = json.loads(lines[1][5:])
    arrays = {}
    for lineno, line in enumerate(lines[2:], 3):
        try:
            name, dtype, dims, offset, count = line.split("\t")
            shape = tuple(int(d) for d in dims.split(",")) if dims else ()
            offset, count = int(offset), int(count)
        except ValueError:
            raise CheckpointError(f"{path}/manifest.txt:{lineno}: malformed entry") from None
        if dtype != "float64" or offset + count > blob.size or int(np.prod(shape)) != count:
            raise CheckpointError(f"{path}/manifest.txt:{lineno}: inconsistent entry for {name}")
        arrays[name] = blob[offset:offset + count].reshape(shape).copy()
    return arrays, meta
