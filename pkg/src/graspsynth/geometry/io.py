"""OBJ and PLY mesh input, PLY output with optional vertex colors.

PLY input handles ascii 1.0 and binary_little_endian 1.0; polygon faces
in either format are fan-triangulated. Units are meters throughout; no
conversion is performed.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .mesh import TriangleMesh

_PLY_TYPES = {
    "char": ("b", 1), "int8": ("b", 1),
    "uchar": ("B", 1), "uint8": ("B", 1),
    "short": ("h", 2), "int16": ("h", 2),
    "ushort": ("H", 2), "uint16": ("H", 2),
    "int": ("i", 4), "int32": ("i", 4),
    "uint": ("I", 4), "uint32": ("I", 4),
    "float": ("f", 4), "float32": ("f", 4),
    "double": ("d", 8), "float64": ("d", 8),
}


def load_mesh(path) -> TriangleMesh:
    path = Path(path)
    if path.suffix.lower() == ".obj":
        return _load_obj(path)
    if path.suffix.lower() == ".ply":
        return _load_ply(path)
    raise ValueError(f"unsupported mesh format '{path.suffix}' (want .obj or .ply)")


def _triangulate(poly: list) -> list:
    return [[poly[0], poly[i], poly[i + 1]] for i in range(1, len(poly) - 1)]


def _load_obj(path: Path) -> TriangleMesh:
    verts, faces = [], []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise ValueError(f"{path}: malformed vertex line: {line.strip()!r}")
                verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    raw = int(tok.split("/")[0])
                    idx.append(raw - 1 if raw > 0 else len(verts) + raw)
                if len(idx) < 3:
                    raise ValueError(f"{path}: face with fewer than 3 vertices")
                faces.extend(_triangulate(idx))
    if not verts or not faces:
        raise ValueError(f"{path}: no usable geometry")
    return TriangleMesh(np.array(verts), np.array(faces))


def _parse_ply_header(fh):
    magic = fh.readline().strip()
    if magic != b"ply":
        raise ValueError("not a PLY file")
    fmt = None
    elements = []  # (name, count, [(prop_kind, ...)...])
    while True:
        line = fh.readline()
        if not line:
            raise ValueError("unterminated PLY header")
        tokens = line.decode("ascii", errors="replace").split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise ValueError("property before element in PLY header")
            if tokens[1] == "list":
                elements[-1][2].append(("list", tokens[2], tokens[3], tokens[4]))
            else:
                elements[-1][2].append(("scalar", tokens[1], tokens[2]))
        elif tokens[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian"):
        raise ValueError(f"unsupported PLY format '{fmt}'")
    return fmt, elements


def _load_ply(path: Path) -> TriangleMesh:
    with open(path, "rb") as fh:
        fmt, elements = _parse_ply_header(fh)
        verts, faces = [], []
        for name, count, props in elements:
            if fmt == "ascii":
                rows = [fh.readline().decode("ascii").split() for _ in range(count)]
                for row in rows:
                    _consume_ply_row_ascii(name, props, row, verts, faces)
            else:
                for _ in range(count):
                    _consume_ply_row_binary(name, props, fh, verts, faces)
    if not verts or not faces:
        raise ValueError(f"{path}: PLY lacks vertices or faces")
    return TriangleMesh(np.array(verts), np.array(faces))


def _consume_ply_row_ascii(element, props, row, verts, faces):
    pos = 0
    fields = {}
    for prop in props:
        if prop[0] == "list":
            n = int(row[pos]); pos += 1
            values = [int(float(v)) for v in row[pos:pos + n]]; pos += n
            fields[prop[3]] = values
        else:
            fields[prop[2]] = float(row[pos]); pos += 1
    _store_ply_fields(element, fields, verts, faces)


def _consume_ply_row_binary(element, props, fh, verts, faces):
    fields = {}
    for prop in props:
        if prop[0] == "list":
            cfmt, csz = _PLY_TYPES[prop[1]]
            n = struct.unpack("<" + cfmt, fh.read(csz))[0]
            ifmt, isz = _PLY_TYPES[prop[2]]
            values = struct.unpack(f"<{n}{ifmt}", fh.read(isz * n))
            fields[prop[3]] = [int(v) for v in values]
        else:
            sfmt, ssz = _PLY_TYPES[prop[1]]
            fields[prop[2]] = float(struct.unpack("<" + sfmt, fh.read(ssz))[0])
    _store_ply_fields(element, fields, verts, faces)


def _store_ply_fields(element, fields, verts, faces):
    if element == "vertex":
        verts.append([fields["x"], fields["y"], fields["z"]])
    elif element == "face":
        poly = fields.get("vertex_indices", fields.get("vertex_index"))
        if poly is None:
            raise ValueError("PLY face element lacks vertex indices")
        faces.extend(_triangulate(poly))


def save_ply(path, vertices, faces=None, colors=None, binary=True):
    """Write a PLY mesh or point cloud; colors are (N, 3) uint8 if given."""
    vertices = np.asarray(vertices, dtype=np.float64)
    n = len(vertices)
    have_faces = faces is not None and len(faces) > 0
    header = ["ply"]
    header.append("format binary_little_endian 1.0" if binary else "format ascii 1.0")
    header.append(f"element vertex {n}")
    header += ["property float x", "property float y", "property float z"]
    if colors is not None:
        colors = np.asarray(colors, dtype=np.uint8)
        header += ["property uchar red", "property uchar green", "property uchar blue"]
    header.append(f"element face {len(faces) if have_faces else 0}")
    header.append("property list uchar int vertex_indices")
    header.append("end_header")

    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            for i in range(n):
                fh.write(struct.pack("<3f", *vertices[i]))
                if colors is not None:
                    fh.write(struct.pack("<3B", *colors[i]))
            if have_faces:
                for f in faces:
                    fh.write(struct.pack("<B3i", 3, int(f[0]), int(f[1]), int(f[2])))
        else:
            for i in range(n):
                row = f"{vertices[i][0]} {vertices[i][1]} {vertices[i][2]}"
                if colors is not None:
                    row += f" {colors[i][0]} {colors[i][1]} {colors[i][2]}"
                fh.write((row + "\n").encode("ascii"))
            if have_faces:
                for f in faces:
                    fh.write(f"3 {int(f[0])} {int(f[1])} {int(f[2])}\n".encode("ascii"))
