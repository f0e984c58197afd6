"""Triangle mesh container plus load/normalize/refine/export operations.

Meshes are immutable numpy-array bundles. Dirty geometry (non-manifold,
unoriented, open boundaries, self-intersections, zero-area faces) is accepted
everywhere; only out-of-range face indices are rejected.
"""

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class MeshError(Exception):
    """Raised for unreadable files, bad indices, or degenerate input."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Mesh:
    """Vertices (n,3) float64, faces (m,3) int64, optional unit normals and RGB colors."""

    vertices: np.ndarray
    faces: np.ndarray
    vertex_normals: np.ndarray | None = None
    colors: np.ndarray | None = None

    def __post_init__(self):
        v = _frozen(np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3))
        f = _frozen(np.asarray(self.faces, dtype=np.int64).reshape(-1, 3))
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError(
                f"face index out of range: mesh has {len(v)} vertices, "
                f"face indices span [{f.min()}, {f.max()}]"
            )
        if self.vertex_normals is not None:
            n = _frozen(np.asarray(self.vertex_normals, dtype=np.float64).reshape(-1, 3))
            if len(n) != len(v):
                raise MeshError("vertex_normals length does not match vertex count")
            norms = np.linalg.norm(n, axis=1)
            if not np.all(np.abs(norms - 1.0) < 1e-6):
                raise MeshError("vertex_normals must be unit length")
            object.__setattr__(self, "vertex_normals", n)
        if self.colors is not None:
            c = _frozen(np.asarray(self.colors, dtype=np.float64).reshape(-1, 3))
            if len(c) != len(v):
                raise MeshError("colors length does not match vertex count")
            object.__setattr__(self, "colors", c)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)


@dataclass(frozen=True)
class NormalizationTransform:
    """Rigid shift + uniform scale mapping model coordinates into the unit ball.

    normalized = (x + translation) * scale; scale is strictly positive.
    """

    translation: np.ndarray
    scale: float

    def __post_init__(self):
        t = _frozen(np.asarray(self.translation, dtype=np.float64).reshape(3))
        object.__setattr__(self, "translation", t)
        if not (self.scale > 0):
            raise MeshError(f"scale must be positive, got {self.scale}")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) + self.translation) * self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale - self.translation

    def to_dict(self) -> dict:
        return {"translation": self.translation.tolist(), "scale": float(self.scale)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationTransform":
        return cls(np.array(d["translation"], dtype=np.float64), float(d["scale"]))


# ---------------------------------------------------------------------------
# loading


def load_mesh(path) -> Mesh:
    """Load an OBJ or PLY mesh. Polygonal faces are fan-triangulated."""
    path = Path(path)
    if not path.exists():
        raise MeshError(f"mesh file not found: {path}")
    suffix = path.suffix.lower()
    if suffix == ".obj":
        return _load_obj(path)
    if suffix == ".ply":
        return _load_ply(path)
    raise MeshError(f"unsupported mesh format: {path} (expected .obj or .ply)")


def _load_obj(path: Path) -> Mesh:
    vertices = []
    vcolors = []
    faces = []
    with open(path, "r", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise MeshError(f"{path}:{lineno}: malformed vertex line")
                vertices.append([float(x) for x in parts[1:4]])
                if len(parts) >= 7:  # nonstandard per-vertex color extension
                    vcolors.append([float(x) for x in parts[4:7]])
            elif tag == "f":
                idx = []
                for tok in parts[1:]:
                    head = tok.split("/")[0]
                    i = int(head)
                    idx.append(i - 1 if i > 0 else len(vertices) + i)
                if len(idx) < 3:
                    raise MeshError(f"{path}:{lineno}: face with fewer than 3 vertices")
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    if not vertices:
        raise MeshError(f"{path}: no vertices found")
    colors = np.array(vcolors) if len(vcolors) == len(vertices) and vcolors else None
    try:
        return Mesh(np.array(vertices), np.array(faces).reshape(-1, 3), colors=colors)
    except MeshError as e:
        raise MeshError(f"{path}: {e}") from e


_PLY_DTYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def _load_ply(path: Path) -> Mesh:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise MeshError(f"{path}: not a PLY file")
        fmt = None
        elements = []  # (name, count, [(prop_name, dtype) or ('list', count_dt, item_dt, name)])
        while True:
            line = fh.readline()
            if not line:
                raise MeshError(f"{path}: unexpected end of PLY header")
            parts = line.decode("ascii", errors="replace").split()
            if not parts or parts[0] == "comment":
                continue
            if parts[0] == "format":
                fmt = parts[1]
            elif parts[0] == "element":
                elements.append((parts[1], int(parts[2]), []))
            elif parts[0] == "property":
                if not elements:
                    raise MeshError(f"{path}: property before element in header")
                if parts[1] == "list":
                    elements[-1][2].append(("list", parts[2], parts[3], parts[4]))
                else:
                    elements[-1][2].append((parts[2], parts[1]))
            elif parts[0] == "end_header":
                break
        if fmt not in ("binary_little_endian", "ascii"):
            raise MeshError(f"{path}: unsupported PLY format {fmt!r}")
        data = {}
        for name, count, props in elements:
            if fmt == "ascii":
                data[name] = _read_ply_ascii_element(fh, count, props, path)
            else:
                data[name] = _read_ply_binary_element(fh, count, props, path)
    if "vertex" not in data:
        raise MeshError(f"{path}: PLY has no vertex element")
    vert = data["vertex"]
    try:
        vertices = np.stack([vert["x"], vert["y"], vert["z"]], axis=1)
    except KeyError as e:
        raise MeshError(f"{path}: vertex element missing coordinate {e}") from e
    colors = None
    if all(k in vert for k in ("red", "green", "blue")):
        colors = np.stack([vert["red"], vert["green"], vert["blue"]], axis=1) / 255.0
    normals = None
    if all(k in vert for k in ("nx", "ny", "nz")):
        n = np.stack([vert["nx"], vert["ny"], vert["nz"]], axis=1)
        norms = np.linalg.norm(n, axis=1)
        if np.all(np.abs(norms - 1.0) < 1e-6):
            normals = n
    faces = []
    face_el = data.get("face", {})
    for poly in face_el.get("vertex_indices", face_el.get("vertex_index", [])):
        for k in range(1, len(poly) - 1):
            faces.append([poly[0], poly[k], poly[k + 1]])
    try:
        return Mesh(vertices, np.array(faces, dtype=np.int64).reshape(-1, 3),
                    vertex_normals=normals, colors=colors)
    except MeshError as e:
        raise MeshError(f"{path}: {e}") from e


def _read_ply_binary_element(fh, count, props, path):
    out = {name: [] for name in (p[3] if p[0] == "list" else p[0] for p in props)}
    fixed = all(p[0] != "list" for p in props)
    if fixed:
        dtype = np.dtype([(p[0], "<" + _PLY_DTYPES[p[1]]) for p in props])
        buf = fh.read(dtype.itemsize * count)
        if len(buf) != dtype.itemsize * count:
            raise MeshError(f"{path}: truncated PLY data")
        rec = np.frombuffer(buf, dtype=dtype)
        return {p[0]: rec[p[0]].astype(np.float64) for p in props}
    for _ in range(count):
        for p in props:
            if p[0] == "list":
                cnt_dt = np.dtype("<" + _PLY_DTYPES[p[1]])
                item_dt = np.dtype("<" + _PLY_DTYPES[p[2]])
                raw = fh.read(cnt_dt.itemsize)
                if len(raw) != cnt_dt.itemsize:
                    raise MeshError(f"{path}: truncated PLY data")
                n = int(np.frombuffer(raw, dtype=cnt_dt)[0])
                raw = fh.read(item_dt.itemsize * n)
                if len(raw) != item_dt.itemsize * n:
                    raise MeshError(f"{path}: truncated PLY data")
                out[p[3]].append(np.frombuffer(raw, dtype=item_dt).astype(np.int64))
            else:
                dt = np.dtype("<" + _PLY_DTYPES[p[1]])
                raw = fh.read(dt.itemsize)
                if len(raw) != dt.itemsize:
                    raise MeshError(f"{path}: truncated PLY data")
                out[p[0]].append(float(np.frombuffer(raw, dtype=dt)[0]))
    return {k: (np.array(v) if v and not isinstance(v[0], np.ndarray) else v)
            for k, v in out.items()}


def _read_ply_ascii_element(fh, count, props, path):
    out = {name: [] for name in (p[3] if p[0] == "list" else p[0] for p in props)}
    for _ in range(count):
        line = fh.readline()
        if not line:
            raise MeshError(f"{path}: truncated PLY data")
        toks = line.split()
        i = 0
        for p in props:
            if p[0] == "list":
                n = int(toks[i]); i += 1
                out[p[3]].append(np.array([int(float(t)) for t in toks[i:i + n]]))
                i += n
            else:
                out[p[0]].append(float(toks[i])); i += 1
    return {k: (np.array(v) if v and not isinstance(v[0], np.ndarray) else v)
            for k, v in out.items()}


# ---------------------------------------------------------------------------
# geometry operations


def normalize_mesh(m: Mesh) -> tuple[Mesh, NormalizationTransform]:
    """Center on the bounding-box midpoint and scale so max ||v|| = 1."""
    if m.num_vertices < 1:
        raise MeshError("cannot normalize an empty mesh")
    lo = m.vertices.min(axis=0)
    hi = m.vertices.max(axis=0)
    center = (lo + hi) / 2.0
    radius = np.linalg.norm(m.vertices - center, axis=1).max()
    if radius <= 0:
        raise MeshError("degenerate mesh: all vertices coincide")
    transform = NormalizationTransform(-center, 1.0 / radius)
    out = replace(m, vertices=transform.apply(m.vertices),
                  vertex_normals=m.vertex_normals, colors=m.colors)
    return out, transform


def face_normals_and_areas(m: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Unit face normals and face areas; degenerate faces get zero normal/area."""
    v = m.vertices
    f = m.faces
    cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    double_area = np.linalg.norm(cross, axis=1)
    normals = np.zeros_like(cross)
    ok = double_area > 1e-20
    normals[ok] = cross[ok] / double_area[ok, None]
    return normals, double_area / 2.0


def compute_vertex_normals(m: Mesh) -> Mesh:
    """Area-weighted average of incident face normals; isolated vertices get +z."""
    if m.num_faces == 0:
        raise MeshError("cannot compute vertex normals without faces")
    fn, areas = face_normals_and_areas(m)
    acc = np.zeros((m.num_vertices, 3))
    weighted = fn * areas[:, None]
    for k in range(3):
        np.add.at(acc, m.faces[:, k], weighted)
    norms = np.linalg.norm(acc, axis=1)
    out = np.tile([0.0, 0.0, 1.0], (m.num_vertices, 1))
    ok = norms > 1e-20
    out[ok] = acc[ok] / norms[ok, None]
    return replace(m, vertex_normals=out, colors=m.colors)


def midpoint_subdivide(m: Mesh) -> Mesh:
    """Split every face into 4 via edge midpoints; originals keep their indices."""
    v = m.vertices
    f = m.faces
    edge_index: dict[tuple[int, int], int] = {}
    new_verts = [v]
    next_idx = len(v)

    def midpoint(a: int, b: int) -> int:
        nonlocal next_idx
        key = (a, b) if a < b else (b, a)
        idx = edge_index.get(key)
        if idx is None:
            idx = next_idx
            edge_index[key] = idx
            new_verts.append((v[a] + v[b])[None, :] / 2.0)
            next_idx += 1
        return idx

    new_faces = np.empty((4 * len(f), 3), dtype=np.int64)
    for i, (a, b, c) in enumerate(f):
        ab = midpoint(a, b)
        bc = midpoint(b, c)
        ca = midpoint(c, a)
        new_faces[4 * i:4 * i + 4] = [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
    return Mesh(np.concatenate(new_verts, axis=0), new_faces)


def export_mesh(m: Mesh, colors: np.ndarray, path) -> None:
    """Write a binary little-endian PLY with float32 positions and uchar RGB."""
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    if len(colors) != m.num_vertices:
        raise MeshError(f"colors length {len(colors)} != vertex count {m.num_vertices}")
    if colors.min() < 0 or colors.max() > 1:
        raise MeshError("colors must be in [0, 1]")
    rgb = np.rint(colors * 255.0).astype(np.uint8)
    verts32 = m.vertices.astype("<f4")
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {m.num_vertices}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        f"element face {m.num_faces}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        vert_dtype = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                               ("red", "u1"), ("green", "u1"), ("blue", "u1")])
        rec = np.empty(m.num_vertices, dtype=vert_dtype)
        rec["x"], rec["y"], rec["z"] = verts32[:, 0], verts32[:, 1], verts32[:, 2]
        rec["red"], rec["green"], rec["blue"] = rgb[:, 0], rgb[:, 1], rgb[:, 2]
        fh.write(rec.tobytes())
        for face in m.faces:
            fh.write(struct.pack("<B3i", 3, *face))
