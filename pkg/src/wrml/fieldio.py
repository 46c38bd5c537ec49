"""Binary field files and their JSON sidecar manifests.

Layout: a 16-byte header (8-byte magic, then ``nx_plus1`` and ``ny_plus1`` as
little-endian uint32) followed by the field as little-endian float64 values in
grid order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .grf import Grid2D

MAGIC = b"WRMLFLD1"
_HEADER = struct.Struct("<8sII")


def write_field(path, values, grid: Grid2D, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    values = np.asarray(values, dtype="<f8").ravel()
    if values.size != grid.n_nodes:
        raise ValueError(f"field has {values.size} values, grid has {grid.n_nodes}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, grid.nx_plus1, grid.ny_plus1))
        fh.write(values.tobytes())
    manifest = {"nx_plus1": grid.nx_plus1, "ny_plus1": grid.ny_plus1,
                "hx": grid.hx, "hy": grid.hy}
    if meta:
        manifest.update(meta)
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_field(path) -> tuple[np.ndarray, int, int]:
    """Return ``(values, nx_plus1, ny_plus1)``."""
    raw = Path(path).read_bytes()
    magic, nx1, ny1 = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a field file")
    values = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if values.size != nx1 * ny1:
        raise ValueError(f"{path}: truncated field ({values.size} of {nx1 * ny1} values)")
    return values.astype(float), nx1, ny1


def write_ensemble(directory, members: np.ndarray, grid: Grid2D, meta: dict | None = None):
    """Write members (columns of ``members``) as one field file each plus a manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n_e = members.shape[1]
    names = []
    for i in range(n_e):
        name = f"member_{i:04d}.field"
        write_field(directory / name, members[:, i], grid)
        names.append(name)
    manifest = {"n_members": n_e, "files": names}
    if meta:
        manifest.update(meta)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_ensemble(directory) -> np.ndarray:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    cols = [read_field(directory / name)[0] for name in manifest["files"]]
    return np.column_stack(cols)
