"""Icospheres from scratch: subdivision, validation, and OBJ round-trips.

Run with ``python3 demos/01_icosphere.py``. Outputs land in ``demo_output/``.
"""

from pathlib import Path

import numpy as np

from icoview import icosahedron, icosphere, read_obj, validate_mesh, write_obj

out_dir = Path("demo_output")
out_dir.mkdir(exist_ok=True)

# The level-0 icosphere is the regular icosahedron: 12 vertices on the unit
# sphere. Each subdivision splits every triangle into four and reprojects the
# new midpoints onto the sphere, so counts follow V' = V + E, F' = 4F.
print("level  vertices  edges  faces")
for level in range(5):
    mesh = icosphere(level)
    print(f"{level:5d}  {mesh.num_vertices:8d}  {mesh.num_edges:5d}  {mesh.num_faces:5d}")

# Every vertex sits exactly on the unit sphere and the mesh stays a closed
# manifold at every level (Euler characteristic V - E + F = 2).
mesh = icosphere(3)
norms = np.linalg.norm(mesh.vertices, axis=1)
print(f"\nlevel 3: max |vertex norm - 1| = {np.abs(norms - 1).max():.2e}")

report = validate_mesh(mesh)
print(f"Euler characteristic = {report.euler_characteristic}")
print(f"closed manifold      = {report.is_closed_manifold}")

# Faces wind counter-clockwise seen from outside, which the renderer relies
# on for back-face culling. The triple product of each face against its
# centroid is positive exactly when the winding is outward.
a, b, c = (mesh.vertices[mesh.faces[:, k]] for k in range(3))
outward = np.einsum("ij,ij->i", np.cross(b - a, c - a), (a + b + c) / 3)
print(f"outward-winding faces = {(outward > 0).sum()} / {mesh.num_faces}")

# Meshes round-trip through Wavefront OBJ losslessly at full precision.
path = out_dir / "icosphere_level3.obj"
write_obj(path, mesh)
again = read_obj(path)
print(f"\nwrote {path} ({path.stat().st_size} bytes)")
print(f"OBJ round-trip exact: {np.array_equal(again.vertices, mesh.vertices)}")

# The icosahedron's 12 vertices double as the camera positions of the
# rendering rig, which is why this mesh family anchors the whole pipeline.
print(f"\nicosahedron vertices (first 3 of 12):\n{icosahedron().vertices[:3]}")
