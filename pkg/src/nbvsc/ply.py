"""Minimal binary little-endian PLY with ``x, y, z`` (double) and ``label`` (int)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

_DTYPE = np.dtype([("x", "<f8"), ("y", "<f8"), ("z", "<f8"), ("label", "<i4")])


def write_ply(path, points: np.ndarray, labels=None) -> None:
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    if labels is None:
        labels = np.zeros(len(points), dtype=np.int32)
    labels = np.asarray(labels)
    if len(labels) != len(points):
        raise ValueError("labels must match points")
    rec = np.empty(len(points), dtype=_DTYPE)
    rec["x"], rec["y"], rec["z"] = points.T
    rec["label"] = labels
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(points)}\n"
        "property double x\nproperty double y\nproperty double z\n"
        "property int label\nend_header\n"
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(rec.tobytes())


def read_ply(path):
    """Read a file written by :func:`write_ply`; returns ``(points, labels)``."""
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise ValueError(f"{path}: only binary little-endian PLY is supported")
    n = next(int(h.split()[2]) for h in header if h.startswith("element vertex"))
    body = raw[end + len(b"end_header\n") :]
    if len(body) < n * _DTYPE.itemsize:
        raise ValueError(f"{path}: truncated vertex data")
    rec = np.frombuffer(body, dtype=_DTYPE, count=n)
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1)
    return pts, rec["label"].astype(np.int64)
