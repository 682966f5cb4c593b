"""File formats: TUM trajectories, PLY point clouds, CSV tables."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import DataError
from .geometry import Sim3


def write_tum(path, timestamps, poses: list[Sim3], comment: str | None = None) -> None:
    """``timestamp tx ty tz qx qy qz qw`` per line; Sim(3) scale is carried by the translation only."""
    lines = []
    if comment:
        lines += [f"# {c}" for c in comment.splitlines()]
    lines.append("# timestamp tx ty tz qx qy qz qw")
    for ts, pose in zip(timestamps, poses):
        q = pose.quaternion_xyzw()
        vals = [ts, *pose.t, *q]
        lines.append(" ".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_tum(path) -> tuple[np.ndarray, list[Sim3]]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read trajectory {path}: {exc}") from exc
    stamps, poses = [], []
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 8:
            raise DataError(f"{path}:{n}: expected 8 fields, got {len(parts)}")
        v = np.array([float(p) for p in parts])
        stamps.append(v[0])
        poses.append(Sim3.from_tum(v[1:4], v[4:8]))
    return np.array(stamps), poses


def write_ply(path, points: np.ndarray, binary: bool = True) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        f"ply\nformat {fmt} 1.0\nelement vertex {len(pts)}\n"
        "property double x\nproperty double y\nproperty double z\nend_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(pts.astype("<f8").tobytes())
        else:
            for p in pts:
                fh.write((" ".join(repr(float(c)) for c in p) + "\n").encode("ascii"))


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def read_ply(path) -> np.ndarray:
    """Vertex x/y/z of an ASCII or binary little-endian PLY (vertex element must come first)."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read point cloud {path}: {exc}") from exc
    end = blob.find(b"end_header")
    if not blob.startswith(b"ply") or end < 0:
        raise DataError(f"{path} is not a PLY file")
    body_start = blob.index(b"\n", end) + 1
    header = blob[:end].decode("ascii").splitlines()
    fmt, count, props, in_vertex = None, 0, [], False
    for line in header:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                count = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise DataError("list properties on vertices are not supported")
            props.append((tok[2], _PLY_TYPES[tok[1]]))
    names = [p[0] for p in props]
    if not {"x", "y", "z"} <= set(names):
        raise DataError("PLY vertices lack x/y/z")
    if fmt == "ascii":
        rows = blob[body_start:].decode("ascii").split("\n")[:count]
        table = np.array([[float(v) for v in r.split()[: len(names)]] for r in rows]).reshape(count, len(names))
        cols = [table[:, names.index(c)] for c in "xyz"]
    elif fmt == "binary_little_endian":
        dt = np.dtype([(n, "<" + t) for n, t in props])
        rec = np.frombuffer(blob, dtype=dt, count=count, offset=body_start)
        cols = [rec[c].astype(np.float64) for c in "xyz"]
    else:
        raise DataError(f"unsupported PLY format {fmt}")
    return np.column_stack(cols)


def write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
