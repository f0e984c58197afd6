"""Multi-view rendering of color-blended meshes.

The rasterizer resolves per-pixel face coverage, barycentric weights, and
shading geometrically (no gradients), then a separate shading pass maps vertex
colors to pixels as a linear operation. Loss gradients therefore flow to
vertex colors exactly, while vertex positions stay constant, which is all the
optimization needs.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .mesh import Mesh, face_normals_and_areas


class RenderError(Exception):
    pass


@dataclass(frozen=True)
class Camera:
    """Orbit camera looking at the origin; z is up."""

    azimuth: float = 0.0
    elevation: float = 0.0
    radius: float = 2.5
    fov_deg: float = 60.0

    def __post_init__(self):
        if not self.radius > 1.0:
            raise RenderError(f"camera radius must exceed 1 (unit-sphere scene), got {self.radius}")
        if not 0.0 < self.fov_deg < 180.0:
            raise RenderError(f"fov must be in (0, 180) degrees, got {self.fov_deg}")

    def eye(self) -> np.ndarray:
        ce = math.cos(self.elevation)
        return self.radius * np.array([
            ce * math.cos(self.azimuth),
            ce * math.sin(self.azimuth),
            math.sin(self.elevation),
        ])

    def rotation(self) -> np.ndarray:
        """World->camera rotation; camera space looks down -z."""
        eye = self.eye()
        forward = -eye / np.linalg.norm(eye)
        up = np.array([0.0, 0.0, 1.0])
        if abs(forward @ up) > 0.999:
            up = np.array([1.0, 0.0, 0.0])
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        true_up = np.cross(right, forward)
        return np.stack([right, true_up, -forward])

    def to_dict(self) -> dict:
        return {"azimuth": self.azimuth, "elevation": self.elevation,
                "radius": self.radius, "fov_deg": self.fov_deg}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(**d)


@dataclass(frozen=True)
class ViewDistribution:
    """Primary view plus the law for drawing per-step render viewpoints."""

    primary: Camera = Camera()
    azimuth_std: float = math.pi / 4
    elevation_std: float = math.pi / 8
    mode: str = "primary"  # primary | anchor | uniform
    views_per_step: int = 5

    def __post_init__(self):
        if self.azimuth_std < 0 or self.elevation_std < 0:
            raise RenderError("view stds must be >= 0")
        if self.views_per_step < 1:
            raise RenderError("views_per_step must be >= 1")
        if self.mode not in ("primary", "anchor", "uniform"):
            raise RenderError(f"unknown view sampling mode {self.mode!r}")


@dataclass(frozen=True)
class Lighting:
    ambient: float = 0.35
    directions: tuple = ((0.577350, 0.577350, 0.577350), (-0.801784, -0.480770, 0.320513))
    intensities: tuple = (0.45, 0.25)


# offline/evaluation renderer uses different shading constants on purpose
OFFLINE_LIGHTING = Lighting(
    ambient=0.45,
    directions=((-0.577350, 0.577350, 0.577350), (0.707107, -0.707107, 0.0)),
    intensities=(0.40, 0.20),
)


@dataclass(frozen=True)
class RenderConfig:
    image_size: int = 224
    highlight_color: tuple = (204.0 / 255.0, 1.0, 0.0)
    base_color: tuple = (0.5, 0.5, 0.5)
    background: tuple = (1.0, 1.0, 1.0)
    lighting: Lighting = field(default_factory=Lighting)

    def __post_init__(self):
        if self.image_size < 32:
            raise RenderError(f"image_size must be >= 32, got {self.image_size}")
        for name in ("highlight_color", "base_color", "background"):
            c = getattr(self, name)
            if len(c) != 3 or min(c) < 0 or max(c) > 1:
                raise RenderError(f"{name} must be RGB in [0,1]^3")

    def to_dict(self) -> dict:
        return {"image_size": self.image_size,
                "highlight_color": list(self.highlight_color),
                "base_color": list(self.base_color),
                "background": list(self.background)}

    @classmethod
    def from_dict(cls, d: dict) -> "RenderConfig":
        d = dict(d)
        for k in ("highlight_color", "base_color", "background"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# ---------------------------------------------------------------------------
# color blending


def blend_colors(probabilities, cfg: RenderConfig):
    """Per-vertex color p*H + (1-p)*G; differentiable when p is a torch tensor."""
    if isinstance(probabilities, torch.Tensor):
        p = probabilities
        with torch.no_grad():
            bad = (p < -1e-6) | (p > 1 + 1e-6)
            if bool(bad.any()):
                raise RenderError("probabilities must lie in [0, 1]")
        h = torch.tensor(cfg.highlight_color, dtype=p.dtype)
        g = torch.tensor(cfg.base_color, dtype=p.dtype)
        return p[:, None] * h + (1.0 - p[:, None]) * g
    p = np.asarray(probabilities, dtype=np.float64)
    if p.min() < -1e-6 or p.max() > 1 + 1e-6:
        raise RenderError("probabilities must lie in [0, 1]")
    h = np.array(cfg.highlight_color)
    g = np.array(cfg.base_color)
    return p[:, None] * h + (1.0 - p[:, None]) * g


# ---------------------------------------------------------------------------
# rasterization


@dataclass
class RasterMap:
    """Per-pixel coverage of one view: which face, barycentric weights, shading."""

    height: int
    width: int
    rows: np.ndarray        # (P,) covered pixel rows
    cols: np.ndarray        # (P,) covered pixel cols
    face: np.ndarray        # (P,) face index per covered pixel
    corners: np.ndarray     # (P,3) vertex indices of that face
    weights: np.ndarray     # (P,3) perspective-correct barycentric weights
    shade: np.ndarray       # (P,) diffuse+ambient factor in [0,1]

    def coverage_fraction(self) -> float:
        return len(self.rows) / float(self.height * self.width)

    def interpolate(self, per_vertex: np.ndarray) -> np.ndarray:
        """Interpolate a per-vertex scalar to the covered pixels."""
        vals = np.asarray(per_vertex, dtype=np.float64)
        return (vals[self.corners] * self.weights).sum(axis=1)


def rasterize(m: Mesh, camera: Camera, image_size: int,
              lighting: Lighting = Lighting()) -> RasterMap:
    """Z-buffered hard rasterization with two-sided diffuse shading."""
    if m.num_faces == 0:
        raise RenderError("cannot rasterize a mesh with no faces")
    size = int(image_size)
    verts = m.vertices
    faces = m.faces

    rot = camera.rotation()
    cam = (verts - camera.eye()) @ rot.T
    depth = -cam[:, 2]
    # normalized-mesh scenes keep every vertex well in front of the camera
    safe = np.maximum(depth, 1e-9)
    t = math.tan(math.radians(camera.fov_deg) / 2.0)
    sx = (cam[:, 0] / (safe * t) + 1.0) / 2.0 * size
    sy = (1.0 - cam[:, 1] / (safe * t)) / 2.0 * size

    fx = sx[faces]  # (F,3)
    fy = sy[faces]
    fd = depth[faces]

    x0 = np.clip(np.floor(fx.min(axis=1) - 0.5), 0, size - 1).astype(np.int64)
    x1 = np.clip(np.ceil(fx.max(axis=1) + 0.5), 0, size - 1).astype(np.int64)
    y0 = np.clip(np.floor(fy.min(axis=1) - 0.5), 0, size - 1).astype(np.int64)
    y1 = np.clip(np.ceil(fy.max(axis=1) + 0.5), 0, size - 1).astype(np.int64)

    visible = (fd.min(axis=1) > 1e-6) & (fx.max(axis=1) >= 0) & (fx.min(axis=1) < size) \
        & (fy.max(axis=1) >= 0) & (fy.min(axis=1) < size)
    widths = np.where(visible, x1 - x0 + 1, 0)
    heights = np.where(visible, y1 - y0 + 1, 0)
    counts = widths * heights
    total = int(counts.sum())
    if total == 0:
        return _empty_rastermap(size)

    cand_face = np.repeat(np.arange(len(faces)), counts)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total) - np.repeat(offsets, counts)
    w_rep = np.repeat(widths, counts)
    cand_col = np.repeat(x0, counts) + local % np.maximum(w_rep, 1)
    cand_row = np.repeat(y0, counts) + local // np.maximum(w_rep, 1)

    px = cand_col + 0.5
    py = cand_row + 0.5
    ax, ay = fx[cand_face, 0], fy[cand_face, 0]
    bx, by = fx[cand_face, 1], fy[cand_face, 1]
    cx, cy = fx[cand_face, 2], fy[cand_face, 2]
    denom = (by - cy) * (ax - cx) + (cx - bx) * (ay - cy)
    ok = np.abs(denom) > 1e-12
    w0 = np.where(ok, ((by - cy) * (px - cx) + (cx - bx) * (py - cy)) / np.where(ok, denom, 1.0), -1.0)
    w1 = np.where(ok, ((cy - ay) * (px - cx) + (ax - cx) * (py - cy)) / np.where(ok, denom, 1.0), -1.0)
    w2 = 1.0 - w0 - w1
    inside = ok & (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
    if not inside.any():
        return _empty_rastermap(size)

    cand_face = cand_face[inside]
    cand_row = cand_row[inside]
    cand_col = cand_col[inside]
    w = np.stack([w0[inside], w1[inside], w2[inside]], axis=1)

    # perspective-correct weights: screen-space bary over 1/depth
    d = fd[cand_face]
    w_over_d = w / d
    inv_depth = w_over_d.sum(axis=1)
    w_persp = w_over_d / inv_depth[:, None]
    pix_depth = 1.0 / inv_depth

    flat = cand_row * size + cand_col
    order = np.lexsort((pix_depth, flat))
    flat_sorted = flat[order]
    keep = np.ones(len(order), dtype=bool)
    keep[1:] = flat_sorted[1:] != flat_sorted[:-1]
    sel = order[keep]

    face_sel = cand_face[sel]
    normals, _ = face_normals_and_areas(m)
    shade = np.full(len(faces), lighting.ambient)
    for direction, intensity in zip(lighting.directions, lighting.intensities):
        ldir = np.asarray(direction, dtype=np.float64)
        ldir = ldir / np.linalg.norm(ldir)
        shade = shade + intensity * np.abs(normals @ ldir)
    shade = np.clip(shade, 0.0, 1.0)

    return RasterMap(
        height=size, width=size,
        rows=cand_row[sel], cols=cand_col[sel],
        face=face_sel,
        corners=m.faces[face_sel],
        weights=w_persp[sel],
        shade=shade[face_sel],
    )


def _empty_rastermap(size: int) -> RasterMap:
    z = np.zeros(0, dtype=np.int64)
    return RasterMap(height=size, width=size, rows=z, cols=z, face=z,
                     corners=np.zeros((0, 3), dtype=np.int64),
                     weights=np.zeros((0, 3)), shade=np.zeros(0))


def shade_image(rmap: RasterMap, colors: torch.Tensor, cfg: RenderConfig) -> torch.Tensor:
    """Compose an (H,W,3) image from vertex colors; linear, so autograd-exact."""
    dtype = colors.dtype
    bg = torch.tensor(cfg.background, dtype=dtype)
    img = bg.expand(rmap.height, rmap.width, 3).clone()
    if len(rmap.rows) == 0:
        return img
    weights = torch.from_numpy(rmap.weights).to(dtype)
    shade = torch.from_numpy(rmap.shade).to(dtype)
    corner_colors = colors[torch.from_numpy(rmap.corners.reshape(-1))].reshape(-1, 3, 3)
    pix = (corner_colors * weights[:, :, None]).sum(dim=1) * shade[:, None]
    img[torch.from_numpy(rmap.rows), torch.from_numpy(rmap.cols)] = pix
    return img.clamp(0.0, 1.0)


def render_views(m: Mesh, colors, cameras, cfg: RenderConfig) -> torch.Tensor:
    """Render one image per camera; returns (k, H, W, 3) in [0,1]."""
    if m.num_faces == 0:
        raise RenderError("cannot render a mesh with no faces")
    if not isinstance(colors, torch.Tensor):
        colors = torch.from_numpy(np.asarray(colors, dtype=np.float64)).float()
    if colors.shape != (m.num_vertices, 3):
        raise RenderError(f"colors must be ({m.num_vertices}, 3), got {tuple(colors.shape)}")
    images = [shade_image(rasterize(m, cam, cfg.image_size, cfg.lighting), colors, cfg)
              for cam in cameras]
    return torch.stack(images)


# ---------------------------------------------------------------------------
# view sampling


def sample_views(dist: ViewDistribution, seed: int) -> list[Camera]:
    """Draw the per-step camera set; deterministic in the seed."""
    gen = torch.Generator().manual_seed(int(seed))
    n = dist.views_per_step
    p = dist.primary

    def gaussian(count):
        az = torch.randn(count, generator=gen, dtype=torch.float64) * dist.azimuth_std
        el = torch.randn(count, generator=gen, dtype=torch.float64) * dist.elevation_std
        return [Camera(p.azimuth + float(a), p.elevation + float(e), p.radius, p.fov_deg)
                for a, e in zip(az, el)]

    if dist.mode == "primary":
        return gaussian(n)
    if dist.mode == "anchor":
        return [p] + gaussian(n - 1)
    az = torch.rand(n, generator=gen, dtype=torch.float64) * (2 * math.pi)
    el = (torch.rand(n, generator=gen, dtype=torch.float64) - 0.5) * (2 * math.pi / 3)
    return [Camera(float(a), float(e), p.radius, p.fov_deg) for a, e in zip(az, el)]


# ---------------------------------------------------------------------------
# 2D perspective augmentation


def sample_perspective_corners(distortion_scale: float, width: int, height: int,
                               seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Original and displaced corner positions for the random projective warp.

    Each corner moves by at most distortion_scale/2 of the image dimension
    per axis.
    """
    gen = torch.Generator().manual_seed(int(seed))
    src = np.array([[0.0, 0.0], [width - 1.0, 0.0],
                    [width - 1.0, height - 1.0], [0.0, height - 1.0]])
    u = torch.rand(4, 2, generator=gen, dtype=torch.float64).numpy() * 2.0 - 1.0
    limits = np.array([(width - 1) / 2.0, (height - 1) / 2.0]) * distortion_scale
    return src, src + u * limits


def _homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 matrix H with H @ [x_src, y_src, 1] ~ [x_dst, y_dst, 1] for the 4 pairs."""
    a = []
    b = []
    for (x, y), (u, v) in zip(src, dst):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b += [u, v]
    h = np.linalg.solve(np.array(a), np.array(b))
    return np.append(h, 1.0).reshape(3, 3)


def augment_perspective(img: torch.Tensor, distortion_scale: float, seed: int,
                        background=(1.0, 1.0, 1.0)) -> torch.Tensor:
    """Random projective warp with bilinear resampling and background fill.

    Deterministic in the seed; differentiable w.r.t. the input pixels.
    """
    if not 0.0 <= distortion_scale <= 1.0:
        raise RenderError("distortion_scale must be in [0, 1]")
    if distortion_scale == 0.0:
        return img
    h, w = img.shape[0], img.shape[1]
    src, dst = sample_perspective_corners(distortion_scale, w, h, seed)
    back = _homography(dst, src)  # output pixel -> source pixel

    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    ones = np.ones_like(xs)
    pts = np.stack([xs, ys, ones], axis=-1) @ back.T
    sx = pts[..., 0] / pts[..., 2]
    sy = pts[..., 1] / pts[..., 2]
    grid = torch.from_numpy(np.stack([2 * sx / (w - 1) - 1, 2 * sy / (h - 1) - 1], axis=-1))
    grid = grid.to(img.dtype)[None]

    chan = img.permute(2, 0, 1)[None]
    mask = torch.ones(1, 1, h, w, dtype=img.dtype)
    warped = torch.nn.functional.grid_sample(chan, grid, mode="bilinear",
                                             padding_mode="zeros", align_corners=True)
    warped_mask = torch.nn.functional.grid_sample(mask, grid, mode="bilinear",
                                                  padding_mode="zeros", align_corners=True)
    bg = torch.tensor(background, dtype=img.dtype).view(1, 3, 1, 1)
    out = warped + (1.0 - warped_mask) * bg
    return out[0].permute(1, 2, 0)


# ---------------------------------------------------------------------------
# offline renderer (evaluation path, intentionally distinct from the
# optimization renderer: supersampled, numpy-only, different lighting)


def render_offline(m: Mesh, colors: np.ndarray, camera: Camera, cfg: RenderConfig,
                   supersample: int = 2) -> np.ndarray:
    colors = np.asarray(colors, dtype=np.float64)
    size = cfg.image_size * supersample
    rmap = rasterize(m, camera, size, OFFLINE_LIGHTING)
    img = np.tile(np.asarray(cfg.background, dtype=np.float64), (size, size, 1))
    if len(rmap.rows):
        pix = (colors[rmap.corners] * rmap.weights[:, :, None]).sum(axis=1)
        img[rmap.rows, rmap.cols] = pix * rmap.shade[:, None]
    img = img.reshape(cfg.image_size, supersample, cfg.image_size, supersample, 3)
    return np.clip(img.mean(axis=(1, 3)), 0.0, 1.0)


def save_image_png(img, path) -> None:
    """Write an (H,W,3) float image in [0,1] as 8-bit PNG."""
    from PIL import Image

    if isinstance(img, torch.Tensor):
        img = img.detach().numpy()
    arr = np.clip(np.asarray(img) * 255.0, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)
