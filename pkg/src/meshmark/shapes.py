"""Procedural meshes used by tests, mock guidance tasks, and CLI demos."""

import numpy as np

from .mesh import Mesh


def make_tetrahedron() -> Mesh:
    verts = np.array([
        [1.0, 1.0, 1.0],
        [1.0, -1.0, -1.0],
        [-1.0, 1.0, -1.0],
        [-1.0, -1.0, 1.0],
    ]) / np.sqrt(3.0)
    faces = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return Mesh(verts, faces)


def make_quad() -> Mesh:
    """Two coplanar triangles spanning [-1,1]^2 in the z=0 plane, CCW from +z."""
    verts = np.array([
        [-1.0, -1.0, 0.0],
        [1.0, -1.0, 0.0],
        [1.0, 1.0, 0.0],
        [-1.0, 1.0, 0.0],
    ])
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    return Mesh(verts, faces)


def make_cube(half_extent: float = 1.0) -> Mesh:
    """Axis-aligned cube with corners at ±half_extent.

    Face diagonals all connect even-parity corners, so area-weighted vertex
    normals point exactly along the corner directions.
    """
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)],
                       dtype=np.float64) * half_extent
    # index bit layout: 4*x + 2*y + z with -1 -> 0, +1 -> 1
    quads = [
        (0, 1, 3, 2),  # x = -1, outward -x
        (4, 6, 7, 5),  # x = +1, outward +x
        (0, 4, 5, 1),  # y = -1
        (2, 3, 7, 6),  # y = +1
        (0, 2, 6, 4),  # z = -1
        (1, 5, 7, 3),  # z = +1
    ]

    def parity(i):
        return (i & 1) ^ ((i >> 1) & 1) ^ ((i >> 2) & 1)

    faces = []
    for a, b, c, d in quads:
        # split along the diagonal whose endpoints have even parity
        if parity(a) == 0:
            faces += [[a, b, c], [a, c, d]]
        else:
            faces += [[b, c, d], [b, d, a]]
    return Mesh(corners, np.array(faces))


def make_icosphere(subdivisions: int = 3) -> Mesh:
    """Geodesic sphere from a subdivided icosahedron (level 3 -> 642 vertices)."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    verts_list = [tuple(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                p = np.array(verts_list[a]) + np.array(verts_list[b])
                p /= np.linalg.norm(p)
                cache[key] = len(verts_list)
                verts_list.append(tuple(p))
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = np.array(new_faces)
    return Mesh(np.array(verts_list), faces)


def make_uv_sphere(n_lat: int = 24, n_lon: int = 32) -> Mesh:
    """Latitude/longitude sphere; an independent triangulation of the unit sphere."""
    verts = [(0.0, 0.0, 1.0)]
    for i in range(1, n_lat):
        theta = np.pi * i / n_lat
        for j in range(n_lon):
            lam = 2 * np.pi * j / n_lon
            verts.append((np.sin(theta) * np.cos(lam),
                          np.sin(theta) * np.sin(lam),
                          np.cos(theta)))
    verts.append((0.0, 0.0, -1.0))
    south = len(verts) - 1

    def ring(i, j):
        return 1 + (i - 1) * n_lon + (j % n_lon)

    faces = []
    for j in range(n_lon):
        faces.append([0, ring(1, j), ring(1, j + 1)])
    for i in range(1, n_lat - 1):
        for j in range(n_lon):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces += [[a, c, d], [a, d, b]]
    for j in range(n_lon):
        faces.append([south, ring(n_lat - 1, j + 1), ring(n_lat - 1, j)])
    return Mesh(np.array(verts), np.array(faces))


def polar_cap_mask(m: Mesh, z_threshold: float = 0.6) -> np.ndarray:
    """Ground-truth membership for the synthetic cap task: vertices with z above the cut."""
    return m.vertices[:, 2] > z_threshold
