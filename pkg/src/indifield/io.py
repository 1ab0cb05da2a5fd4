"""PLY / OBJ readers and writers plus the sensor sidecar JSON.

Point clouds use a PLY ``vertex`` element with ``x y z`` and optional
``nx ny nz`` and ``sensor_id`` properties.  Sensors live in a JSON sidecar::

    {"schema_version": 1, "sensors": [{"id": 0, "position": [x, y, z]}, ...]}
"""

from __future__ import annotations

import json
import os

import numpy as np

from .errors import InvalidArgument, IoError, ParseError
from .geom import OrientedPointCloud, SensorSet, TriangleMesh

SCHEMA_VERSION = 1

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


class _Element:
    def __init__(self, name, count):
        self.name = name
        self.count = count
        self.props = []  # (name, dtype) or (name, (count_dtype, item_dtype))

    @property
    def has_lists(self):
        return any(isinstance(t, tuple) for _, t in self.props)

    def scalar_dtype(self, endian="<"):
        return np.dtype([(n, endian + t) for n, t in self.props])


def _parse_header(buf: bytes):
    end = buf.find(b"end_header")
    if not buf.startswith(b"ply") or end < 0:
        raise ParseError("not a PLY file or missing end_header", 0)
    nl = buf.find(b"\n", end)
    if nl < 0:
        raise ParseError("unterminated PLY header", end)
    data_start = nl + 1
    fmt = None
    elements = []
    offset = 0
    for raw in buf[:end].split(b"\n"):
        line = raw.decode("ascii", errors="replace").strip()
        words = line.split()
        here = offset
        offset += len(raw) + 1
        if not words or words[0] in ("ply", "comment", "obj_info"):
            continue
        if words[0] == "format":
            if len(words) < 2 or words[1] not in ("ascii", "binary_little_endian"):
                raise ParseError(f"unsupported PLY format line {line!r}", here)
            fmt = words[1]
        elif words[0] == "element":
            try:
                elements.append(_Element(words[1], int(words[2])))
            except (IndexError, ValueError):
                raise ParseError(f"malformed element line {line!r}", here) from None
        elif words[0] == "property":
            if not elements:
                raise ParseError("property before any element", here)
            try:
                if words[1] == "list":
                    t = (_PLY_TYPES[words[2]], _PLY_TYPES[words[3]])
                    elements[-1].props.append((words[4], t))
                else:
                    elements[-1].props.append((words[2], _PLY_TYPES[words[1]]))
            except (IndexError, KeyError):
                raise ParseError(f"malformed property line {line!r}", here) from None
        else:
            raise ParseError(f"unexpected header line {line!r}", here)
    if fmt is None:
        raise ParseError("PLY header lacks a format line", 0)
    return fmt, elements, data_start


def _read_binary(buf, elements, pos):
    out = {}
    for el in elements:
        if not el.has_lists:
            dt = el.scalar_dtype()
            need = dt.itemsize * el.count
            if len(buf) - pos < need:
                have = (len(buf) - pos) // max(dt.itemsize, 1)
                raise ParseError(
                    f"truncated data: element '{el.name}' declares {el.count} entries, "
                    f"only {have} present", len(buf))
            out[el.name] = np.frombuffer(buf, dt, el.count, pos)
            pos += need
            continue
        if len(el.props) == 1:
            # fast path for pure-triangle face lists
            name, (ct, it) = el.props[0]
            dt = np.dtype([("n", "<" + ct), ("i", "<" + it, 3)])
            if len(buf) - pos >= dt.itemsize * el.count:
                tri = np.frombuffer(buf, dt, el.count, pos)
                if np.all(tri["n"] == 3):
                    # a plain (F, 3) index array stands in for the row list
                    out[el.name] = tri["i"].astype(np.int64)
                    pos += dt.itemsize * el.count
                    continue
        # list-bearing element: walk entries one property at a time
        rows = []
        for _ in range(el.count):
            row = {}
            for name, t in el.props:
                if isinstance(t, tuple):
                    cdt, idt = np.dtype("<" + t[0]), np.dtype("<" + t[1])
                    if pos + cdt.itemsize > len(buf):
                        raise ParseError(f"truncated data in element '{el.name}'", pos)
                    c = int(np.frombuffer(buf, cdt, 1, pos)[0])
                    pos += cdt.itemsize
                    if pos + c * idt.itemsize > len(buf):
                        raise ParseError(f"truncated data in element '{el.name}'", pos)
                    row[name] = np.frombuffer(buf, idt, c, pos)
                    pos += c * idt.itemsize
                else:
                    dt = np.dtype("<" + t)
                    if pos + dt.itemsize > len(buf):
                        raise ParseError(f"truncated data in element '{el.name}'", pos)
                    row[name] = np.frombuffer(buf, dt, 1, pos)[0]
                    pos += dt.itemsize
            rows.append(row)
        out[el.name] = rows
    return out


def _read_ascii(buf, elements, pos):
    lines = buf[pos:].split(b"\n")
    offsets = np.cumsum([0] + [len(l) + 1 for l in lines]) + pos
    li = 0
    out = {}
    for el in elements:
        rows = []
        for _ in range(el.count):
            while li < len(lines) and not lines[li].strip():
                li += 1
            if li >= len(lines):
                raise ParseError(
                    f"truncated data: element '{el.name}' declares {el.count} entries, "
                    f"only {len(rows)} present", len(buf))
            words = lines[li].split()
            at = int(offsets[li])
            li += 1
            row, w = {}, 0
            try:
                for name, t in el.props:
                    if isinstance(t, tuple):
                        c = int(words[w])
                        row[name] = np.array(words[w + 1:w + 1 + c], dtype=t[1])
                        if len(row[name]) != c:
                            raise IndexError
                        w += 1 + c
                    else:
                        row[name] = np.array(words[w], dtype=t)[()]
                        w += 1
            except (IndexError, ValueError):
                raise ParseError(f"malformed '{el.name}' entry", at) from None
            rows.append(row)
        if not el.has_lists:
            arr = np.zeros(el.count, el.scalar_dtype())
            for i, row in enumerate(rows):
                for name, _ in el.props:
                    arr[i][name] = row[name]
            out[el.name] = arr
        else:
            out[el.name] = rows
    return out


def _read_ply(path):
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    fmt, elements, pos = _parse_header(buf)
    if fmt == "ascii":
        data = _read_ascii(buf, elements, pos)
    else:
        data = _read_binary(buf, elements, pos)
    return data, {el.name: el for el in elements}, pos


def read_point_cloud(path) -> OrientedPointCloud:
    data, elements, start = _read_ply(path)
    if "vertex" not in data:
        raise ParseError("PLY has no vertex element", start)
    v = data["vertex"]
    names = v.dtype.names
    for c in "xyz":
        if c not in names:
            raise ParseError(f"vertex element lacks property '{c}'", start)
    pts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float32)
    normals = None
    if all(c in names for c in ("nx", "ny", "nz")):
        normals = np.stack([v["nx"], v["ny"], v["nz"]], axis=1).astype(np.float32)
    ids = v["sensor_id"].astype(np.int32) if "sensor_id" in names else None
    bad = ~np.isfinite(pts).all(axis=1)
    if normals is not None:
        bad |= ~np.isfinite(normals).all(axis=1)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise ParseError(f"non-finite value in vertex {row}", start + row * v.dtype.itemsize)
    return OrientedPointCloud(pts, normals, ids)


def write_point_cloud(cloud: OrientedPointCloud, path, binary: bool = True) -> None:
    props = [("x", "f4"), ("y", "f4"), ("z", "f4")]
    if len(cloud.normals):
        props += [("nx", "f4"), ("ny", "f4"), ("nz", "f4")]
    props.append(("sensor_id", "i4"))
    arr = np.zeros(len(cloud), [(n, "<" + t) for n, t in props])
    for a, c in enumerate("xyz"):
        arr[c] = cloud.points[:, a]
    if len(cloud.normals):
        for a, c in enumerate(("nx", "ny", "nz")):
            arr[c] = cloud.normals[:, a]
    arr["sensor_id"] = cloud.sensor_ids
    type_names = {"f4": "float", "i4": "int"}
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(cloud)}"]
    header += [f"property {type_names[t]} {n}" for n, t in props]
    header.append("end_header")
    try:
        with open(path, "wb") as f:
            f.write(("\n".join(header) + "\n").encode("ascii"))
            if binary:
                f.write(arr.tobytes())
            else:
                for row in arr:
                    f.write((" ".join(_fmt(x) for x in row) + "\n").encode("ascii"))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _fmt(x):
    if isinstance(x, (np.floating, float)):
        # 9 significant digits round-trip float32 exactly
        return f"{float(x):.9g}"
    return str(int(x))


def write_mesh(mesh: TriangleMesh, path, format: str | None = None) -> None:
    if format is None:
        format = os.path.splitext(str(path))[1].lstrip(".").lower() or "obj"
    try:
        with open(path, "w" if format == "obj" else "wb") as f:
            if format == "obj":
                f.write(f"# {len(mesh.vertices)} vertices, {len(mesh.triangles)} faces\n")
                np.savetxt(f, mesh.vertices, fmt="v %.17g %.17g %.17g")
                np.savetxt(f, mesh.triangles + 1, fmt="f %d %d %d")
            elif format == "ply":
                header = ("ply\nformat binary_little_endian 1.0\n"
                          f"element vertex {len(mesh.vertices)}\n"
                          "property double x\nproperty double y\nproperty double z\n"
                          f"element face {len(mesh.triangles)}\n"
                          "property list uchar int vertex_indices\nend_header\n")
                f.write(header.encode("ascii"))
                f.write(mesh.vertices.astype("<f8").tobytes())
                faces = np.zeros(len(mesh.triangles), [("n", "u1"), ("i", "<i4", 3)])
                faces["n"] = 3
                faces["i"] = mesh.triangles
                f.write(faces.tobytes())
            else:
                raise InvalidArgument(f"unknown mesh format {format!r}")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_mesh(path) -> TriangleMesh:
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".ply":
        data, _, start = _read_ply(path)
        v = data.get("vertex")
        if v is None:
            raise ParseError("PLY has no vertex element", start)
        verts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
        faces = data.get("face", [])
        if isinstance(faces, np.ndarray):
            return TriangleMesh(verts, faces)
        tris = []
        for row in faces:
            idx = row.get("vertex_indices", row.get("vertex_index"))
            tris.extend(_fan(np.asarray(idx, np.int64)))
        return TriangleMesh(verts, np.asarray(tris, np.int64).reshape(-1, 3))
    if ext != ".obj":
        raise ParseError(f"unsupported mesh extension {ext!r}", 0)
    verts, tris = [], []
    try:
        f = open(path, "r")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    with f:
        offset = 0
        for line in f:
            at = offset
            offset += len(line.encode())
            words = line.split()
            if not words:
                continue
            try:
                if words[0] == "v":
                    verts.append([float(w) for w in words[1:4]])
                elif words[0] == "f":
                    idx = [int(w.split("/")[0]) for w in words[1:]]
                    idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                    tris.extend(_fan(np.asarray(idx, np.int64)))
            except ValueError:
                raise ParseError(f"malformed OBJ line {line.strip()!r}", at) from None
    return TriangleMesh(np.asarray(verts, np.float64).reshape(-1, 3),
                        np.asarray(tris, np.int64).reshape(-1, 3))


def _fan(idx):
    return [[idx[0], idx[i], idx[i + 1]] for i in range(1, len(idx) - 1)]


def write_sensors(sensors: SensorSet, path, extra: dict | None = None) -> None:
    """Sensor sidecar JSON; ``extra`` keys (e.g. provenance) are appended."""
    entries = []
    for i in range(len(sensors)):
        e = {"id": int(sensors.ids[i]), "position": [float(x) for x in sensors.positions[i]]}
        if sensors.orientations is not None:
            e["orientation"] = [float(x) for x in sensors.orientations[i]]
        entries.append(e)
    try:
        with open(path, "w") as f:
            json.dump({"schema_version": SCHEMA_VERSION, "sensors": entries, **(extra or {})},
                      f, indent=1)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_sensors(path) -> SensorSet:
    try:
        with open(path) as f:
            doc = json.load(f)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid sensor JSON: {exc.msg}", exc.pos) from None
    try:
        entries = doc["sensors"]
        ids = [int(e["id"]) for e in entries]
        pos = [[float(x) for x in e["position"]] for e in entries]
        ori = None
        if entries and all("orientation" in e for e in entries):
            ori = [[float(x) for x in e["orientation"]] for e in entries]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"sensor JSON missing field: {exc}", 0) from None
    return SensorSet(np.asarray(pos).reshape(-1, 3), ori, ids)

