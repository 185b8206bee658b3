"""File formats: ASCII XYZ, binary little-endian PLY, and the JSON/CSV exports.

All writers are deterministic: fixed field order, sorted JSON keys, `\n` line
endings, shortest round-trip float text.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import InputError
from .geom import PointCloud, RigidTransform, Rotation

_PLY_MAGIC = b"ply"


def write_xyz(cloud: PointCloud, path) -> None:
    lines = ["%.17g %.17g %.17g" % (x, y, z) for x, y, z in cloud.points]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"{path}: {exc}") from exc


def read_xyz(path) -> PointCloud:
    rows = []
    for ln, line in enumerate(_read_bytes(path).decode().splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 3:
            raise InputError(f"{path}:{ln}: expected 3 values, got {len(parts)}")
        try:
            rows.append([float(v) for v in parts])
        except ValueError as exc:
            raise InputError(f"{path}:{ln}: {exc}") from exc
    return PointCloud(np.array(rows, dtype=np.float64).reshape(-1, 3))


def write_ply(cloud: PointCloud, path) -> None:
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(cloud)}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "end_header\n"
    )
    body = cloud.points.astype("<f4").tobytes()
    Path(path).write_bytes(header.encode("ascii") + body)


def read_ply(path) -> PointCloud:
    raw = _read_bytes(path)
    if not raw.startswith(_PLY_MAGIC):
        raise InputError(f"{path}: not a PLY file")
    end = raw.find(b"end_header\n")
    if end < 0:
        raise InputError(f"{path}: missing end_header")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    body = raw[end + len(b"end_header\n") :]

    n_vertex = None
    properties = []
    for line in header[1:]:
        tokens = line.split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if tokens[1] != "binary_little_endian":
                raise InputError(f"{path}: unsupported format {tokens[1]}")
        elif tokens[0] == "element":
            if tokens[1] != "vertex":
                raise InputError(f"{path}: unsupported element {tokens[1]}")
            n_vertex = int(tokens[2])
        elif tokens[0] == "property":
            properties.append((tokens[1], tokens[2]))
    if n_vertex is None:
        raise InputError(f"{path}: no vertex element")
    if properties != [("float", "x"), ("float", "y"), ("float", "z")]:
        raise InputError(f"{path}: expected float x/y/z properties, got {properties}")
    need = n_vertex * 3 * 4
    if len(body) < need:
        raise InputError(f"{path}: truncated payload ({len(body)} < {need} bytes)")
    pts = np.frombuffer(body[:need], dtype="<f4").reshape(n_vertex, 3)
    return PointCloud(pts.astype(np.float64))


def _dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def write_json(obj, path) -> None:
    _dump_json(obj, path)


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise InputError(f"{path}: {exc}") from exc


def transform_to_dict(transform: RigidTransform) -> dict:
    return {
        "r": [float(v) for v in transform.r.m.reshape(-1)],
        "t": [float(v) for v in transform.t],
    }


def transform_from_dict(obj: dict) -> RigidTransform:
    try:
        r = np.array(obj["r"], dtype=np.float64).reshape(3, 3)
        t = np.array(obj["t"], dtype=np.float64).reshape(3)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"bad transform object: {exc}") from exc
    return RigidTransform(Rotation(r), t)


def write_transform(transform: RigidTransform, path) -> None:
    _dump_json(transform_to_dict(transform), path)


def read_transform(path) -> RigidTransform:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: {exc}") from exc
    return transform_from_dict(obj)


def write_correspondences_csv(xi: np.ndarray, yi: np.ndarray, scores: np.ndarray, path) -> None:
    lines = ["xi,yi,score"]
    for a, b, s in zip(xi, yi, scores):
        lines.append(f"{int(a)},{int(b)},{float(s)!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_correspondences_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "xi,yi,score":
        raise InputError(f"{path}: missing 'xi,yi,score' header")
    xi, yi, sc = [], [], []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise InputError(f"{path}:{ln}: expected 3 fields")
        try:
            xi.append(int(parts[0]))
            yi.append(int(parts[1]))
            sc.append(float(parts[2]))
        except ValueError as exc:
            raise InputError(f"{path}:{ln}: {exc}") from exc
    return (
        np.array(xi, dtype=np.int64),
        np.array(yi, dtype=np.int64),
        np.array(sc, dtype=np.float64),
    )


def write_correspondences_json(xi: np.ndarray, yi: np.ndarray, scores: np.ndarray, path) -> None:
    rows = [
        {"score": float(s), "xi": int(a), "yi": int(b)}
        for a, b, s in zip(xi, yi, scores)
    ]
    _dump_json(rows, path)


def hypothesis_to_dict(transform: RigidTransform, inliers: int, source: str) -> dict:
    out = transform_to_dict(transform)
    out["inliers"] = int(inliers)
    out["source"] = source
    return out


def write_hypothesis(transform: RigidTransform, inliers: int, source: str, path) -> None:
    _dump_json(hypothesis_to_dict(transform, inliers, source), path)


def read_hypothesis(path) -> tuple[RigidTransform, int, str]:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: {exc}") from exc
    transform = transform_from_dict(obj)
    try:
        return transform, int(obj["inliers"]), str(obj["source"])
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"bad hypothesis object: {exc}") from exc


def float32_payload_roundtrip(cloud: PointCloud) -> PointCloud:
    """The cloud as it would read back from PLY (float32 quantization applied)."""
    return PointCloud(cloud.points.astype(np.float32).astype(np.float64))
