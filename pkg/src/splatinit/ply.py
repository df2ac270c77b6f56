"""Minimal PLY reader/writer for colored point clouds (x, y, z float, red/green/blue uchar)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from splatinit.initialization import PointCloud

_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


class PlyError(ValueError):
    pass


def write_ply(pc: PointCloud, path, binary: bool = True) -> None:
    n = len(pc)
    rgb = np.round(np.clip(pc.colors, 0, 1) * 255).astype(np.uint8)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        f"ply\nformat {fmt} 1.0\nelement vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n"
    )
    pos = pc.positions.astype("<f4")
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if binary:
            rec = np.empty(n, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("r", "u1"), ("g", "u1"), ("b", "u1")])
            rec["x"], rec["y"], rec["z"] = pos[:, 0], pos[:, 1], pos[:, 2]
            rec["r"], rec["g"], rec["b"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
            f.write(rec.tobytes())
        else:
            lines = [
                f"{np.format_float_positional(p[0], unique=True)} {np.format_float_positional(p[1], unique=True)} "
                f"{np.format_float_positional(p[2], unique=True)} {c[0]} {c[1]} {c[2]}"
                for p, c in zip(pos, rgb)
            ]
            f.write(("\n".join(lines) + "\n").encode("ascii"))


def _parse_header(data: bytes):
    end = data.find(b"end_header")
    if end < 0:
        raise PlyError("missing end_header")
    nl = data.find(b"\n", end)
    if nl < 0:
        raise PlyError("end_header line is not terminated")
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise PlyError("line 1: missing 'ply' magic")
    fmt = None
    elements = []  # (name, count, [(prop, dtype)])
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            try:
                elements.append((parts[1], int(parts[2]), []))
            except (IndexError, ValueError):
                raise PlyError(f"line {lineno}: malformed element declaration {line!r}") from None
        elif parts[0] == "property":
            if not elements:
                raise PlyError(f"line {lineno}: property before any element")
            if parts[1] == "list":
                raise PlyError(f"line {lineno}: list properties are not supported")
            if len(parts) != 3 or parts[1] not in _TYPES:
                raise PlyError(f"line {lineno}: malformed property {line!r}")
            elements[-1][2].append((parts[2], _TYPES[parts[1]]))
        else:
            raise PlyError(f"line {lineno}: unknown header keyword {parts[0]!r}")
    if fmt not in ("ascii", "binary_little_endian"):
        raise PlyError(f"unsupported format {fmt!r}")
    return fmt, elements, nl + 1


def read_ply(path) -> PointCloud:
    data = Path(path).read_bytes()
    fmt, elements, offset = _parse_header(data)
    vertex = None
    if fmt == "ascii":
        rows = data[offset:].decode("ascii").split("\n")
        rows = [r for r in rows if r.strip()]
        cursor = 0
        for name, count, props in elements:
            if cursor + count > len(rows):
                raise PlyError(f"element {name!r}: expected {count} rows, found {len(rows) - cursor}")
            block = rows[cursor:cursor + count]
            cursor += count
            if name == "vertex":
                table = {p: [] for p, _ in props}
                for j, r in enumerate(block):
                    vals = r.split()
                    if len(vals) != len(props):
                        raise PlyError(f"element 'vertex' row {j}: expected {len(props)} values")
                    for (p, dt), v in zip(props, vals):
                        table[p].append(v)
                vertex = {p: np.array(table[p], dtype=dt) for p, dt in props}
    else:
        for name, count, props in elements:
            dt = np.dtype([(p, "<" + t) for p, t in props])
            need = dt.itemsize * count
            if offset + need > len(data):
                have = (len(data) - offset) // max(dt.itemsize, 1)
                raise PlyError(f"element {name!r}: expected {count} records at byte offset {offset}, found {have}")
            arr = np.frombuffer(data, dtype=dt, count=count, offset=offset)
            offset += need
            if name == "vertex":
                vertex = {p: arr[p] for p, _ in props}
    if vertex is None:
        raise PlyError("no 'vertex' element")
    for p in ("x", "y", "z"):
        if p not in vertex:
            raise PlyError(f"vertex element lacks property {p!r}")
    pos = np.stack([vertex["x"], vertex["y"], vertex["z"]], axis=1).astype(np.float32).astype(np.float64)
    if all(c in vertex for c in ("red", "green", "blue")):
        col = np.stack([vertex["red"], vertex["green"], vertex["blue"]], axis=1).astype(np.float64) / 255.0
    else:
        col = np.full_like(pos, 0.5)
    return PointCloud(pos, col)
