"""Viewpoint cameras and a software rasterizer for per-vertex feature images.

Cameras sit at the 12 vertices of the regular icosahedron, all looking at the
origin. Rasterization is z-buffered at pixel centers with perspective-correct
barycentric interpolation, and produces a fragment map: per pixel, the visible
face index, barycentric coordinates inside it, and view depth. Shading is
feature interpolation only; no lighting term ever multiplies the features, so
background pixels are exactly zero.

The per-subject render output (V x C x H x W) round-trips through the ``.mvr``
binary format documented at :func:`save_mvr`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import TriangleMesh, icosahedron

# Inclusive edge tolerance for the pixel-in-triangle test, in barycentric
# units. Pixels exactly on a shared edge are claimed by both faces and the
# depth tie-break (lower face index) decides.
EDGE_EPS = 1e-9

# look-at falls back to +X (then +Y) when forward and up are this aligned
DEGENERATE_UP_DOT = 0.999

MVR_MAGIC = b"MVR1"


def look_at(position, target, up_hint=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Right-handed world-to-camera matrix for a camera at ``position``.

    The camera looks along ``forward = normalize(target - position)`` and
    maps it to -Z in eye space. If ``up_hint`` is (near-)parallel to forward,
    +X is used instead, then +Y if +X is also degenerate.

    Returns a 4x4 float64 matrix whose upper-left 3x3 block is orthonormal.
    """
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    d = target - position
    dist = np.linalg.norm(d)
    if dist == 0.0:
        raise ValueError("camera position equals target")
    forward = d / dist
    up = np.asarray(up_hint, dtype=np.float64)
    up = up / np.linalg.norm(up)
    if abs(forward @ up) > DEGENERATE_UP_DOT:
        up = np.array([1.0, 0.0, 0.0])
        if abs(forward @ up) > DEGENERATE_UP_DOT:
            up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    true_up = np.cross(right, forward)
    view = np.eye(4)
    view[0, :3] = right
    view[1, :3] = true_up
    view[2, :3] = -forward
    view[:3, 3] = -view[:3, :3] @ position
    return view


def perspective(fov_y_deg: float, aspect: float, near: float, far: float) -> np.ndarray:
    """Standard perspective projection (NDC in [-1, 1]^3, eye looks down -Z)."""
    if not 0.0 < fov_y_deg < 180.0:
        raise ValueError(f"fov_y must be in (0, 180) degrees, got {fov_y_deg}")
    if not 0.0 < near < far:
        raise ValueError(f"need 0 < near < far, got near={near}, far={far}")
    f = 1.0 / np.tan(np.radians(fov_y_deg) / 2.0)
    proj = np.zeros((4, 4))
    proj[0, 0] = f / aspect
    proj[1, 1] = f
    proj[2, 2] = (far + near) / (near - far)
    proj[2, 3] = 2.0 * far * near / (near - far)
    proj[3, 2] = -1.0
    return proj


@dataclass(frozen=True)
class Camera:
    """Perspective camera: pose fields plus matrices derived from them.

    ``view`` and ``proj`` are recomputed from the other fields on
    construction, so they are always consistent (and bit-reproducible).
    Images are square; ``resolution`` is the H = W pixel count.
    """

    position: np.ndarray
    target: np.ndarray = (0.0, 0.0, 0.0)
    up_hint: np.ndarray = (0.0, 0.0, 1.0)
    fov_y_deg: float = 60.0
    near: float = 0.01
    far: float = 10.0
    resolution: int = 224
    view: np.ndarray = field(init=False, repr=False, compare=False)
    proj: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=np.float64).reshape(3)
        tgt = np.asarray(self.target, dtype=np.float64).reshape(3)
        up = np.asarray(self.up_hint, dtype=np.float64).reshape(3)
        if int(self.resolution) < 16:
            raise ValueError(f"resolution must be >= 16, got {self.resolution}")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "target", tgt)
        object.__setattr__(self, "up_hint", up / np.linalg.norm(up))
        object.__setattr__(self, "resolution", int(self.resolution))
        object.__setattr__(self, "view", look_at(pos, tgt, up))
        object.__setattr__(self, "proj", perspective(self.fov_y_deg, 1.0, self.near, self.far))

    @property
    def forward(self) -> np.ndarray:
        return -self.view[2, :3]


def camera_rig(
    radius_multiplier: float = 2.5,
    fov_y_deg: float = 60.0,
    resolution: int = 224,
    up_hint=(0.0, 0.0, 1.0),
    near: float = 0.01,
    far: float = 10.0,
) -> list[Camera]:
    """The 12-viewpoint rig: one camera per icosahedron vertex.

    Camera ``i`` sits at ``radius_multiplier`` times vertex ``i`` of the
    canonical icosahedron and looks at the origin; ordering follows the
    canonical vertex order. ``radius_multiplier`` must exceed 1 so cameras
    stay outside the unit sphere.
    """
    if radius_multiplier <= 1.0:
        raise ValueError(f"radius_multiplier must be > 1 (camera outside the unit sphere), got {radius_multiplier}")
    if int(resolution) < 16:
        raise ValueError(f"resolution must be >= 16, got {resolution}")
    return [
        Camera(
            position=v * radius_multiplier,
            up_hint=up_hint,
            fov_y_deg=fov_y_deg,
            near=near,
            far=far,
            resolution=int(resolution),
        )
        for v in icosahedron().vertices
    ]


@dataclass(frozen=True)
class FragmentMap:
    """Per-pixel rasterization record (the pixel-to-face map).

    ``face_index`` is -1 at background pixels, where ``depth`` is +inf and
    ``barycentric`` is all zeros. At foreground pixels the barycentric
    coordinates are perspective-correct, each >= -1e-6, summing to 1 within
    1e-6.
    """

    face_index: np.ndarray  # (H, W) int32
    barycentric: np.ndarray  # (H, W, 3) float64
    depth: np.ndarray  # (H, W) float64

    def __post_init__(self):
        if self.face_index.shape != self.depth.shape or self.barycentric.shape != self.face_index.shape + (3,):
            raise ValueError("inconsistent FragmentMap array shapes")

    @property
    def resolution(self) -> tuple[int, int]:
        return self.face_index.shape

    @property
    def foreground(self) -> np.ndarray:
        return self.face_index >= 0

    @property
    def coverage(self) -> float:
        """Fraction of pixels covered by the mesh."""
        return float(np.count_nonzero(self.face_index >= 0)) / self.face_index.size


def rasterize(mesh: TriangleMesh, camera: Camera, resolution: int | None = None) -> FragmentMap:
    """Z-buffered rasterization of ``mesh`` at pixel centers.

    Perspective projection with perspective-correct barycentrics; depth ties
    are broken in favor of the lower face index, so output is deterministic.
    Faces not entirely on the far side of the near plane are skipped (no
    clipping is performed).
    """
    if mesh.num_faces == 0:
        raise ValueError("cannot rasterize an empty mesh")
    size = int(resolution) if resolution is not None else camera.resolution
    if size < 16:
        raise ValueError(f"resolution must be >= 16, got {size}")
    height = width = size

    hom = np.hstack([mesh.vertices, np.ones((mesh.num_vertices, 1))])
    clip = hom @ (camera.proj @ camera.view).T
    w = clip[:, 3]  # view depth along forward axis, positive in front
    in_front = w >= camera.near
    with np.errstate(divide="ignore", invalid="ignore"):
        ndc = clip[:, :2] / w[:, None]
    sx = (ndc[:, 0] + 1.0) * (width / 2.0) - 0.5
    sy = (1.0 - ndc[:, 1]) * (height / 2.0) - 0.5

    face_index = np.full((height, width), -1, dtype=np.int32)
    bary = np.zeros((height, width, 3))
    depth = np.full((height, width), np.inf)

    tri = mesh.faces
    keep = in_front[tri].all(axis=1)
    tx = np.where(keep[:, None], sx[tri], 0.0)
    ty = np.where(keep[:, None], sy[tri], 0.0)
    xlo = np.maximum(np.ceil(tx.min(axis=1) - 1e-7).astype(np.int64), 0)
    xhi = np.minimum(np.floor(tx.max(axis=1) + 1e-7).astype(np.int64), width - 1)
    ylo = np.maximum(np.ceil(ty.min(axis=1) - 1e-7).astype(np.int64), 0)
    yhi = np.minimum(np.floor(ty.max(axis=1) + 1e-7).astype(np.int64), height - 1)
    candidates = np.flatnonzero(keep & (xlo <= xhi) & (ylo <= yhi))

    tw = w[tri]
    for f in candidates:  # ascending order implements the lower-index tie-break
        (x0, x1, x2), (y0, y1, y2) = tx[f], ty[f]
        denom = (y1 - y2) * (x0 - x2) + (x2 - x1) * (y0 - y2)
        if abs(denom) < 1e-14:  # zero screen area (edge-on)
            continue
        px = np.arange(xlo[f], xhi[f] + 1)[None, :]
        py = np.arange(ylo[f], yhi[f] + 1)[:, None]
        s0 = ((y1 - y2) * (px - x2) + (x2 - x1) * (py - y2)) / denom
        s1 = ((y2 - y0) * (px - x2) + (x0 - x2) * (py - y2)) / denom
        s2 = 1.0 - s0 - s1
        inside = (s0 >= -EDGE_EPS) & (s1 >= -EDGE_EPS) & (s2 >= -EDGE_EPS)
        if not inside.any():
            continue
        w0, w1, w2 = tw[f]
        inv_w = s0 / w0 + s1 / w1 + s2 / w2
        with np.errstate(divide="ignore", invalid="ignore"):
            d = 1.0 / inv_w  # only read where inside, which implies inv_w > 0
        rows = slice(ylo[f], yhi[f] + 1)
        cols = slice(xlo[f], xhi[f] + 1)
        win = inside & (d < depth[rows, cols])
        if not win.any():
            continue
        depth[rows, cols][win] = d[win]
        face_index[rows, cols][win] = f
        dwin = d[win]
        bary[rows, cols][win] = np.stack(
            [(s0[win] / w0) * dwin, (s1[win] / w1) * dwin, (s2[win] / w2) * dwin], axis=-1
        )
    return FragmentMap(face_index=face_index, barycentric=bary, depth=depth)


def shade_features(mesh: TriangleMesh, fragments: FragmentMap) -> np.ndarray:
    """Interpolate per-vertex features over a fragment map.

    Each foreground pixel gets the barycentric interpolation of its face's
    three vertex feature rows; background stays exactly 0. Returns a
    (C, H, W) float64 image.
    """
    if mesh.features is None:
        raise ValueError("mesh has no features attached")
    height, width = fragments.face_index.shape
    out = np.zeros((mesh.channel_count, height, width))
    fg = fragments.face_index >= 0
    if fg.any():
        corner_feats = mesh.features[mesh.faces[fragments.face_index[fg]]]  # (p, 3, C)
        out[:, fg] = np.einsum("pk,pkc->cp", fragments.barycentric[fg], corner_feats)
    return out


@dataclass(frozen=True)
class ViewStack:
    """All rendered views of one subject: (V, C, H, W) float32, H = W."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 4:
            raise ValueError(f"ViewStack data must be 4-D (V, C, H, W), got shape {arr.shape}")
        if arr.shape[3] != arr.shape[2]:
            raise ValueError(f"views must be square, got {arr.shape[2]}x{arr.shape[3]}")
        if not np.isfinite(arr).all():
            raise ValueError("ViewStack contains non-finite values")
        object.__setattr__(self, "data", arr)

    @property
    def view_count(self) -> int:
        return self.data.shape[0]

    @property
    def channel_count(self) -> int:
        return self.data.shape[1]

    @property
    def resolution(self) -> int:
        return self.data.shape[2]


def render_views(mesh: TriangleMesh, rig: list[Camera]) -> ViewStack:
    """Render the mesh's features from every camera of the rig."""
    if not rig:
        raise ValueError("camera rig is empty")
    if mesh.features is None:
        raise ValueError("mesh has no features attached")
    sizes = {cam.resolution for cam in rig}
    if len(sizes) != 1:
        raise ValueError(f"all rig cameras must share one resolution, got {sorted(sizes)}")
    images = [shade_features(mesh, rasterize(mesh, cam)) for cam in rig]
    return ViewStack(np.stack(images).astype(np.float32))


def save_mvr(path: str | Path, stack: ViewStack) -> None:
    """Write a ViewStack as ``.mvr``.

    Layout: magic bytes ``MVR1``; four little-endian uint32 V, C, H, W; then
    V*C*H*W little-endian IEEE-754 float32 values in V-major, then C, then
    row-major H x W order.
    """
    v, c, h, w = stack.data.shape
    with open(path, "wb") as fh:
        fh.write(MVR_MAGIC)
        fh.write(struct.pack("<4I", v, c, h, w))
        fh.write(np.ascontiguousarray(stack.data, dtype="<f4").tobytes())


def load_mvr(path: str | Path) -> ViewStack:
    """Read a ``.mvr`` file written by :func:`save_mvr`."""
    raw = Path(path).read_bytes()
    if raw[:4] != MVR_MAGIC:
        raise ValueError(f"{path}: not an MVR file (bad magic)")
    if len(raw) < 20:
        raise ValueError(f"{path}: truncated header")
    v, c, h, w = struct.unpack("<4I", raw[4:20])
    expected = 20 + 4 * v * c * h * w
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes for {v}x{c}x{h}x{w}, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=20).reshape(v, c, h, w)
    return ViewStack(data.copy())


def save_view_pngs(stack: ViewStack, out_dir: str | Path, stem: str) -> list[Path]:
    """Dump per-view per-channel grayscale PNGs for visual inspection.

    Each channel is min-max normalized to 8 bits independently; this is a
    lossy preview, never an input format.
    """
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for v in range(stack.view_count):
        for c in range(stack.channel_count):
            img = stack.data[v, c].astype(np.float64)
            lo, hi = float(img.min()), float(img.max())
            scaled = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
            path = out_dir / f"{stem}_view{v:02d}_ch{c}.png"
            Image.fromarray(np.round(scaled * 255.0).astype(np.uint8), mode="L").save(path)
            written.append(path)
    return written
