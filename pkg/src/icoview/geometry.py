"""Icosphere construction: the regular icosahedron, midpoint subdivision with
reprojection to the unit sphere, per-vertex feature attachment, and mesh
validation. Plus the plain-text formats used for geometry (Wavefront OBJ with
``v``/``f`` records) and per-vertex features (CSV, one row per vertex).

All functions are pure: meshes are treated as immutable and every operation
returns a new :class:`TriangleMesh`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

GOLDEN_RATIO = (1.0 + np.sqrt(5.0)) / 2.0

# Memory guard: level 8 already gives 655,362 vertices.
MAX_SUBDIVISION_LEVEL = 8


@dataclass(frozen=True)
class TriangleMesh:
    """Closed or open triangle mesh with optional per-vertex features.

    Parameters
    ----------
    vertices : (n, 3) float array
        Vertex positions in model coordinates.
    faces : (m, 3) int array
        Vertex index triples, counter-clockwise when viewed from outside.
    features : (n, C) float array, optional
        One row of C channel values per vertex. Channel semantics are opaque
        here; no normalization is applied.
    """

    vertices: np.ndarray
    faces: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        f = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64))
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"vertices must have shape (n, 3), got {v.shape}")
        if f.ndim != 2 or f.shape[1] != 3:
            raise ValueError(f"faces must have shape (m, 3), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range [0, num_vertices)")
        degenerate = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 2] == f[:, 0])
        if degenerate.any():
            raise ValueError(f"degenerate face(s) with repeated vertex: {np.flatnonzero(degenerate).tolist()}")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.features is not None:
            feats = np.ascontiguousarray(np.asarray(self.features, dtype=np.float64))
            if feats.ndim != 2:
                raise ValueError(f"features must be 2-D (num_vertices, C), got shape {feats.shape}")
            if feats.shape[0] != len(v):
                raise ValueError(
                    f"feature row count {feats.shape[0]} does not match vertex count {len(v)}"
                )
            if feats.shape[1] < 1:
                raise ValueError("features need at least one channel")
            bad = ~np.isfinite(feats)
            if bad.any():
                row = int(np.flatnonzero(bad.any(axis=1))[0])
                raise ValueError(f"non-finite feature value at vertex row {row}")
            object.__setattr__(self, "features", feats)

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    @property
    def channel_count(self) -> int:
        return 0 if self.features is None else self.features.shape[1]

    def edges(self) -> np.ndarray:
        """Unique undirected edges as a (num_edges, 2) sorted-index array."""
        return _unique_edges(self.faces)[0]

    @property
    def num_edges(self) -> int:
        return self.edges().shape[0]


@dataclass(frozen=True)
class ValidationReport:
    """Findings of :func:`validate_mesh`. Never raises; read the fields."""

    num_vertices: int
    num_edges: int
    num_faces: int
    euler_characteristic: int
    duplicate_faces: tuple[int, ...]
    degenerate_faces: tuple[int, ...]
    edge_incidence_histogram: dict[int, int] = field(default_factory=dict)
    boundary_edge_count: int = 0
    nonmanifold_edge_count: int = 0

    @property
    def is_closed_manifold(self) -> bool:
        return (
            not self.duplicate_faces
            and not self.degenerate_faces
            and self.boundary_edge_count == 0
            and self.nonmanifold_edge_count == 0
        )


def _unique_edges(faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unique sorted-index edges and per-face-edge inverse map.

    Exact integer edge keys (sorted index pairs); no positional matching.
    """
    e = np.stack([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], axis=1)
    e = np.sort(e.reshape(-1, 2), axis=1)
    uniq, inverse = np.unique(e, axis=0, return_inverse=True)
    return uniq, inverse.reshape(-1)


def icosahedron() -> TriangleMesh:
    """The regular icosahedron with unit circumradius.

    Vertices are the canonical golden-ratio set
    {(0, ±1, ±φ), (±1, ±φ, 0), (±φ, 0, ±1)} / sqrt(1 + φ²), unrotated, in a
    fixed order; faces wind counter-clockwise seen from outside. The fixed
    vertex order doubles as the canonical camera-viewpoint order.
    """
    t = GOLDEN_RATIO
    verts = np.array(
        [
            [-1.0, t, 0.0],
            [1.0, t, 0.0],
            [-1.0, -t, 0.0],
            [1.0, -t, 0.0],
            [0.0, -1.0, t],
            [0.0, 1.0, t],
            [0.0, -1.0, -t],
            [0.0, 1.0, -t],
            [t, 0.0, -1.0],
            [t, 0.0, 1.0],
            [-t, 0.0, -1.0],
            [-t, 0.0, 1.0],
        ],
        dtype=np.float64,
    )
    verts /= np.sqrt(1.0 + t * t)
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    return TriangleMesh(verts, faces)


def subdivide(mesh: TriangleMesh, levels: int) -> TriangleMesh:
    """Subdivide each face into 4 by edge midpoints, ``levels`` times.

    Midpoint vertices are deduplicated per undirected edge; after each step
    all vertices are reprojected to the unit sphere. Counts obey
    V' = V + E, E' = 2E + 3F, F' = 4F per step.

    Parameters
    ----------
    mesh : TriangleMesh
        Closed 2-manifold triangle mesh without features.
    levels : int
        Number of subdivision steps, 0 to 8 inclusive.

    Raises
    ------
    ValueError
        If features are attached (resampling is unsupported), the mesh is
        not a closed 2-manifold, or ``levels`` is out of range.
    """
    if mesh.features is not None:
        raise ValueError("cannot subdivide a mesh with features attached; subdivide first, then attach")
    levels = int(levels)
    if not 0 <= levels <= MAX_SUBDIVISION_LEVEL:
        raise ValueError(f"subdivision level must be in [0, {MAX_SUBDIVISION_LEVEL}], got {levels}")
    report = validate_mesh(mesh)
    if not report.is_closed_manifold:
        raise ValueError(
            "subdivision requires a closed 2-manifold mesh "
            f"(boundary edges: {report.boundary_edge_count}, "
            f"non-manifold edges: {report.nonmanifold_edge_count})"
        )
    verts, faces = mesh.vertices, mesh.faces
    for _ in range(levels):
        verts, faces = _subdivide_once(verts, faces)
    return TriangleMesh(verts, faces)


def _subdivide_once(verts: np.ndarray, faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    uniq, inverse = _unique_edges(faces)
    mid = verts[uniq[:, 0]] + verts[uniq[:, 1]]
    # per-face midpoint vertex ids for edges (a,b), (b,c), (c,a)
    ab, bc, ca = (inverse.reshape(-1, 3) + len(verts)).T
    a, b, c = faces.T
    new_faces = np.concatenate(
        [
            np.stack([a, ab, ca], axis=1),
            np.stack([b, bc, ab], axis=1),
            np.stack([c, ca, bc], axis=1),
            np.stack([ab, bc, ca], axis=1),
        ]
    )
    new_verts = np.vstack([verts, mid])
    new_verts /= np.linalg.norm(new_verts, axis=1, keepdims=True)
    return new_verts, new_faces


def icosphere(level: int) -> TriangleMesh:
    """Unit icosphere at the given subdivision level (level 0 = icosahedron)."""
    return subdivide(icosahedron(), level)


def attach_features(mesh: TriangleMesh, features: np.ndarray) -> TriangleMesh:
    """Return a copy of ``mesh`` carrying the (num_vertices, C) feature matrix.

    Geometry is unchanged. Rejects row-count mismatches and non-finite values
    (the error names the offending vertex row).
    """
    return TriangleMesh(mesh.vertices, mesh.faces, features)


def validate_mesh(mesh: TriangleMesh) -> ValidationReport:
    """Inspect a mesh and report counts, Euler characteristic and defects.

    Pure; findings are reported, never raised. Degenerate faces cannot occur
    in a TriangleMesh (the constructor rejects them) but the field is kept so
    reports from raw face arrays via :func:`validate_faces` stay uniform.
    """
    return validate_faces(mesh.vertices.shape[0], mesh.faces)


def validate_faces(num_vertices: int, faces: np.ndarray) -> ValidationReport:
    """Validation report for a raw face-index array (see :func:`validate_mesh`)."""
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    degenerate = (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 2] == faces[:, 0])
    canonical = np.sort(faces, axis=1)
    _, counts = np.unique(canonical, axis=0, return_counts=True)
    duplicates: list[int] = []
    if (counts > 1).any():
        seen: dict[tuple[int, int, int], int] = {}
        for i, key in enumerate(map(tuple, canonical)):
            if key in seen:
                duplicates.append(i)
            else:
                seen[key] = i
    uniq, inverse = _unique_edges(faces)
    incidence = np.bincount(inverse, minlength=len(uniq)) if len(uniq) else np.zeros(0, dtype=np.int64)
    hist_vals, hist_counts = np.unique(incidence, return_counts=True)
    histogram = {int(k): int(v) for k, v in zip(hist_vals, hist_counts)}
    num_edges = int(len(uniq))
    return ValidationReport(
        num_vertices=int(num_vertices),
        num_edges=num_edges,
        num_faces=int(len(faces)),
        euler_characteristic=int(num_vertices) - num_edges + int(len(faces)),
        duplicate_faces=tuple(duplicates),
        degenerate_faces=tuple(np.flatnonzero(degenerate).tolist()),
        edge_incidence_histogram=histogram,
        boundary_edge_count=int((incidence == 1).sum()),
        nonmanifold_edge_count=int((incidence > 2).sum()),
    )


def write_obj(path: str | Path, mesh: TriangleMesh) -> None:
    """Write geometry as ASCII Wavefront OBJ (``v`` and ``f`` records, 1-based)."""
    path = Path(path)
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_obj(path: str | Path) -> TriangleMesh:
    """Read a Wavefront OBJ mesh (``v``/``f`` records; other records ignored)."""
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            parts = raw.split()
            if not parts or parts[0].startswith("#"):
                continue
            kind = parts[0]
            if kind == "v":
                if len(parts) < 4:
                    raise ValueError(f"{path}:{lineno}: vertex record needs 3 coordinates")
                verts.append([float(p) for p in parts[1:4]])
            elif kind == "f":
                if len(parts) != 4:
                    raise ValueError(f"{path}:{lineno}: only triangular faces are supported")
                # tolerate v/vt/vn face syntax: keep the leading vertex index
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return TriangleMesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                        np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_features_csv(path: str | Path, features: np.ndarray, header: bool = True) -> None:
    """Write per-vertex features as CSV, one row per vertex in mesh order."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ValueError(f"features must be 2-D, got shape {features.shape}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header:
            fh.write("# " + ",".join(f"c{i}" for i in range(features.shape[1])) + "\n")
        for row in features:
            fh.write(",".join(f"{x:.17g}" for x in row) + "\n")


def read_features_csv(path: str | Path) -> np.ndarray:
    """Read a per-vertex feature CSV (optional single ``#`` header row)."""
    rows: list[list[float]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            try:
                rows.append([float(p) for p in line.split(",")])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise ValueError(f"{path}: no feature rows")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ValueError(f"{path}: inconsistent column counts")
    return np.array(rows, dtype=np.float64)
