"""Triangle-bound Gaussian kernels and a differentiable splatting renderer.

Each kernel lives in the local frame of one mesh triangle: its mean is an offset
in units of the triangle scale and its covariance is expressed in the frame
axes. :func:`globalize` places kernels in world space for the current vertices
and similarity transform; :func:`render` projects and alpha-composites them;
the ``*_backward`` functions return analytic gradients for both steps.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .geometry import (
    Camera,
    SimilarityTransform,
    apply_transform,
    rodrigues_exp_batch,
    rotation_vjp_batch,
    to_matrix,
    transform_backward,
    triangle_frames,
    triangle_frames_backward,
)
from .image import Image

SIGMA_MIN = 0.02
SIGMA_MAX = 4.0
DILATION = 0.3
INIT_LOG_SCALE = float(np.log(0.5))
INIT_OPACITY = 0.7
INIT_COLOR = 0.5

CLOUD_FIELDS = ("mu_local", "log_scales", "rot_local", "opacity_logit", "colors")


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    return float(np.log(p / (1.0 - p)))


@dataclass
class GaussianKernel:
    """One kernel, as seen through :meth:`SplatCloud.kernel`."""

    mu_local: np.ndarray
    log_scales: np.ndarray
    rot_local: np.ndarray
    opacity_logit: float
    color: np.ndarray
    triangle: int


@dataclass
class SplatCloud:
    """Kernel parameters stored field-wise, plus the kernel-to-triangle binding."""

    mu_local: np.ndarray
    log_scales: np.ndarray
    rot_local: np.ndarray
    opacity_logit: np.ndarray
    colors: np.ndarray
    binding: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        for name in CLOUD_FIELDS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.binding = np.asarray(self.binding, dtype=np.int64)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        n = len(self.binding)
        if self.binding.size and (self.binding.min() < 0 or self.binding.max() >= len(self.triangles)):
            raise ValueError("kernel binding refers to a missing triangle")
        for name in CLOUD_FIELDS:
            if len(getattr(self, name)) != n:
                raise ValueError(f"field {name} has {len(getattr(self, name))} rows, expected {n}")

    def __len__(self) -> int:
        return len(self.binding)

    def kernel(self, i: int) -> GaussianKernel:
        return GaussianKernel(
            self.mu_local[i], self.log_scales[i], self.rot_local[i],
            float(self.opacity_logit[i]), self.colors[i], int(self.binding[i]),
        )

    def copy(self) -> "SplatCloud":
        return SplatCloud(*(getattr(self, f).copy() for f in CLOUD_FIELDS), self.binding.copy(), self.triangles.copy())

    def params(self) -> dict:
        return {f: getattr(self, f) for f in CLOUD_FIELDS}

    def project_constraints(self) -> None:
        """Clamp scales and colours back into their valid ranges (in place)."""
        np.clip(self.log_scales, np.log(SIGMA_MIN), np.log(SIGMA_MAX), out=self.log_scales)
        np.clip(self.colors, 0.0, 1.0, out=self.colors)

    def to_dict(self) -> dict:
        d = {f: getattr(self, f).tolist() for f in CLOUD_FIELDS}
        d["binding"] = self.binding.tolist()
        d["triangles"] = self.triangles.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SplatCloud":
        n = len(d["binding"])
        shapes = {"mu_local": (n, 3), "log_scales": (n, 3), "rot_local": (n, 3), "opacity_logit": (n,), "colors": (n, 3)}
        arrays = [np.asarray(d[f], dtype=np.float64).reshape(shapes[f]) for f in CLOUD_FIELDS]
        return cls(*arrays, np.asarray(d["binding"], dtype=np.int64),
                   np.asarray(d["triangles"], dtype=np.int64).reshape(-1, 3))


@dataclass
class WorldKernels:
    """World-space kernels: means, 3x3 covariances, opacities in (0, 1) and colours."""

    means: np.ndarray
    covs: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray

    def __len__(self) -> int:
        return len(self.opacities)

    def subset(self, idx) -> "WorldKernels":
        return WorldKernels(self.means[idx], self.covs[idx], self.opacities[idx], self.colors[idx])

    def copy(self) -> "WorldKernels":
        return WorldKernels(self.means.copy(), self.covs.copy(), self.opacities.copy(), self.colors.copy())

    @classmethod
    def empty(cls) -> "WorldKernels":
        return cls(np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros(0), np.zeros((0, 3)))


@dataclass
class WorldGrads:
    means: np.ndarray
    covs: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "WorldGrads":
        return cls(np.zeros((n, 3)), np.zeros((n, 3, 3)), np.zeros(n), np.zeros((n, 3)))

    def __iadd__(self, other: "WorldGrads"):
        self.means += other.means
        self.covs += other.covs
        self.opacities += other.opacities
        self.colors += other.colors
        return self

    def scaled(self, k: float) -> "WorldGrads":
        return WorldGrads(self.means * k, self.covs * k, self.opacities * k, self.colors * k)


def bind_kernels(vertices: np.ndarray, triangles: np.ndarray, per_triangle: int = 1) -> SplatCloud:
    """Attach ``per_triangle`` neutral kernels to every face, centred on it."""
    if per_triangle < 1:
        raise ValueError("per_triangle must be >= 1")
    triangles = np.asarray(triangles, dtype=np.int64)
    n = len(triangles) * per_triangle
    binding = np.repeat(np.arange(len(triangles)), per_triangle)
    return SplatCloud(
        mu_local=np.zeros((n, 3)),
        log_scales=np.full((n, 3), INIT_LOG_SCALE),
        rot_local=np.zeros((n, 3)),
        opacity_logit=np.full(n, logit(INIT_OPACITY)),
        colors=np.full((n, 3), INIT_COLOR),
        binding=binding,
        triangles=triangles,
    )


@dataclass
class GlobalizeCache:
    cloud: SplatCloud
    vertices: np.ndarray  # before the similarity transform
    placed: np.ndarray  # after it
    xf: SimilarityTransform | None
    frames: object
    local_rot: np.ndarray
    scale2: np.ndarray
    sig: np.ndarray
    live: np.ndarray = field(default=None)


def globalize(cloud: SplatCloud, vertices: np.ndarray, xf: SimilarityTransform | None = None, return_cache=False):
    """World kernels for the mesh ``vertices`` moved by ``xf``."""
    vertices = np.asarray(vertices, dtype=np.float64)
    if xf is None or xf.is_identity():
        placed = vertices
    else:
        placed = apply_transform(to_matrix(xf), vertices)
    frames = triangle_frames(placed, cloud.triangles)
    tri = cloud.binding
    centers = frames.centers[tri]
    rot = frames.rotations[tri]
    sigma = frames.scales[tri]
    local_rot = rodrigues_exp_batch(cloud.rot_local)
    means = centers + sigma[:, None] * np.einsum("nij,nj->ni", rot, cloud.mu_local)
    a = sigma[:, None, None] * (rot @ local_rot)
    scale2 = np.exp(2.0 * cloud.log_scales)
    covs = (a * scale2[:, None, :]) @ np.transpose(a, (0, 2, 1))
    sig = sigmoid(cloud.opacity_logit)
    live = ~frames.degenerate[tri]
    world = WorldKernels(means, covs, np.where(live, sig, 0.0), cloud.colors.copy())
    if not return_cache:
        return world
    return world, GlobalizeCache(cloud, vertices, placed, xf, frames, local_rot, scale2, sig, live)


@dataclass
class CloudGrads:
    mu_local: np.ndarray
    log_scales: np.ndarray
    rot_local: np.ndarray
    opacity_logit: np.ndarray
    colors: np.ndarray

    def as_dict(self) -> dict:
        return {f: getattr(self, f) for f in CLOUD_FIELDS}


def globalize_backward(cache: GlobalizeCache, g: WorldGrads):
    """Returns ``(g_vertices, CloudGrads, (g_s, g_r, g_t) or None)``."""
    cloud = cache.cloud
    tri = cloud.binding
    frames = cache.frames
    rot = frames.rotations[tri]
    sigma = frames.scales[tri]
    mu_l = cloud.mu_local

    rot_mu = np.einsum("nij,nj->ni", rot, mu_l)
    g_sigma = np.sum(g.means * rot_mu, axis=1)
    g_rot = sigma[:, None, None] * g.means[:, :, None] * mu_l[:, None, :]
    g_mu_l = sigma[:, None] * np.einsum("nji,nj->ni", rot, g.means)

    rq = rot @ cache.local_rot
    a = sigma[:, None, None] * rq
    a_d = a * cache.scale2[:, None, :]
    g_sym = g.covs + np.transpose(g.covs, (0, 2, 1))
    g_a = g_sym @ a_d
    g_scale2 = np.einsum("nji,njk,nki->ni", a, g.covs, a)
    g_log = 2.0 * g_scale2 * cache.scale2
    g_sigma += np.einsum("nij,nij->n", g_a, rq)
    g_rq = sigma[:, None, None] * g_a
    g_rot += g_rq @ np.transpose(cache.local_rot, (0, 2, 1))
    g_local = np.transpose(rot, (0, 2, 1)) @ g_rq
    g_rot_local = rotation_vjp_batch(cloud.rot_local, g_local)
    g_logit = np.where(cache.live, g.opacities * cache.sig * (1.0 - cache.sig), 0.0)

    m = len(cloud.triangles)
    g_centers = np.zeros((m, 3))
    g_frames = np.zeros((m, 3, 3))
    g_scales = np.zeros(m)
    np.add.at(g_centers, tri, g.means)
    np.add.at(g_frames, tri, g_rot)
    np.add.at(g_scales, tri, g_sigma)
    g_placed = triangle_frames_backward(cache.placed, cloud.triangles, frames, g_centers, g_frames, g_scales)

    grads = CloudGrads(g_mu_l, g_log, g_rot_local, g_logit, g.colors.copy())
    if cache.xf is None or cache.xf.is_identity():
        if cache.xf is None:
            return g_placed, grads, None
        _, g_s, g_r, g_t = transform_backward(cache.xf, cache.vertices, g_placed)
        return g_placed, grads, (g_s, g_r, g_t)
    g_v, g_s, g_r, g_t = transform_backward(cache.xf, cache.vertices, g_placed)
    return g_v, grads, (g_s, g_r, g_t)


# -- rasterisation ----------------------------------------------------------------

@dataclass
class Projection:
    means2d: np.ndarray
    conics: np.ndarray
    depth: np.ndarray
    boxes: np.ndarray
    order: np.ndarray
    visible: np.ndarray
    cam_points: np.ndarray
    jac: np.ndarray  # (n, 2, 3) world -> pixel Jacobian at each mean
    cov2d: np.ndarray


def project_kernels(world: WorldKernels, cam: Camera) -> Projection:
    n = len(world)
    f = cam.focal
    w, h = cam.width, cam.height
    pc = (world.means - cam.position) @ cam.rotation.T
    z = pc[:, 2]
    visible = (z > 1e-3) & np.all(np.isfinite(pc), axis=1) & (world.opacities > 0)
    zs = np.where(visible, z, 1.0)
    means2d = np.stack([f * pc[:, 0] / zs + 0.5 * w, f * pc[:, 1] / zs + 0.5 * h], axis=1)
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = f / zs
    jac[:, 0, 2] = -f * pc[:, 0] / zs**2
    jac[:, 1, 1] = f / zs
    jac[:, 1, 2] = -f * pc[:, 1] / zs**2
    tm = jac @ cam.rotation
    m = tm @ world.covs @ np.transpose(tm, (0, 2, 1))
    cov2d = 0.5 * (m + np.transpose(m, (0, 2, 1)))
    cov2d[:, 0, 0] += DILATION
    cov2d[:, 1, 1] += DILATION
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    visible &= det > 0
    det = np.where(visible, det, 1.0)
    conics = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1)
    ex = 3.0 * np.sqrt(np.clip(cov2d[:, 0, 0], 0.0, None))
    ey = 3.0 * np.sqrt(np.clip(cov2d[:, 1, 1], 0.0, None))
    with np.errstate(invalid="ignore"):
        x0 = np.clip(np.floor(means2d[:, 0] - ex), 0, w)
        x1 = np.clip(np.ceil(means2d[:, 0] + ex) + 1, 0, w)
        y0 = np.clip(np.floor(means2d[:, 1] - ey), 0, h)
        y1 = np.clip(np.ceil(means2d[:, 1] + ey) + 1, 0, h)
    visible &= np.isfinite(x0) & np.isfinite(y0) & np.isfinite(x1) & np.isfinite(y1)
    boxes = np.zeros((n, 4), dtype=np.int32)
    boxes[visible] = np.stack([x0, x1, y0, y1], axis=1)[visible].astype(np.int32)
    visible &= (boxes[:, 1] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 2])
    idx = np.nonzero(visible)[0]
    # content-based tie breaks keep the order independent of the input permutation
    keys = (world.colors[idx, 2], world.colors[idx, 1], world.colors[idx, 0], world.opacities[idx],
            means2d[idx, 1], means2d[idx, 0], z[idx])
    order = idx[np.lexsort(keys)].astype(np.int32)
    return Projection(means2d, conics, z, boxes, order, visible, pc, jac, cov2d)


@dataclass
class RenderContext:
    projection: Projection
    raster: object
    background: np.ndarray
    backend: object


def render(world: WorldKernels, cam: Camera, background=(0.0, 0.0, 0.0), return_context=False, backend=None):
    """Project, depth-sort and alpha-composite ``world`` as seen from ``cam``."""
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    impl = kernels.get_backend(backend)
    w, h = cam.width, cam.height
    if len(world) == 0:
        img = Image(np.broadcast_to(bg, (h, w, 3)).copy(), np.zeros((h, w)))
        if return_context:
            return img, RenderContext(None, None, bg, impl)
        return img
    proj = project_kernels(world, cam)
    rgb, alpha, raster = impl.forward(
        proj.means2d, proj.conics, world.opacities, world.colors, proj.boxes, proj.order,
        bg, w, h, record=return_context, threads=kernels.get_threads(),
    )
    img = Image(np.clip(rgb, 0.0, 1.0), np.clip(alpha, 0.0, 1.0))
    if return_context:
        return img, RenderContext(proj, raster, bg, impl)
    return img


def render_backward(world: WorldKernels, cam: Camera, g_rgb, g_alpha=None, ctx: RenderContext | None = None,
                    background=(0.0, 0.0, 0.0)) -> WorldGrads:
    """Gradient of a loss w.r.t. every world-kernel field, given ``dL/dImage``."""
    n = len(world)
    if ctx is None:
        _, ctx = render(world, cam, background, return_context=True)
    if n == 0 or ctx.projection is None:
        return WorldGrads.zeros(n)
    proj = ctx.projection
    g_rgb = np.asarray(g_rgb, dtype=np.float64)
    if g_alpha is None:
        g_alpha = np.zeros(g_rgb.shape[:2])
    g_m2, g_con, g_op, g_col = ctx.backend.backward(
        ctx.raster, proj.means2d, proj.conics, world.opacities, world.colors, ctx.background,
        g_rgb, g_alpha, cam.width, cam.height, threads=kernels.get_threads(),
    )
    vis = proj.visible
    g_m2 = np.where(vis[:, None], g_m2, 0.0)
    g_con = np.where(vis[:, None], g_con, 0.0)

    a, b, c = proj.conics[:, 0], proj.conics[:, 1], proj.conics[:, 2]
    con = np.stack([np.stack([a, b], 1), np.stack([b, c], 1)], 1)
    g_conmat = np.stack([np.stack([g_con[:, 0], 0.5 * g_con[:, 1]], 1),
                         np.stack([0.5 * g_con[:, 1], g_con[:, 2]], 1)], 1)
    g_cov2d = -con @ g_conmat @ con
    tm = proj.jac @ cam.rotation
    g_covs = np.transpose(tm, (0, 2, 1)) @ g_cov2d @ tm
    covs = world.covs
    g_tm = g_cov2d @ tm @ (covs + np.transpose(covs, (0, 2, 1)))
    g_jac = g_tm @ cam.rotation.T

    f = cam.focal
    pc = proj.cam_points
    z = np.where(vis, pc[:, 2], 1.0)
    x, y = pc[:, 0], pc[:, 1]
    gu, gv = g_m2[:, 0], g_m2[:, 1]
    g_pc = np.empty((n, 3))
    g_pc[:, 0] = gu * f / z - g_jac[:, 0, 2] * f / z**2
    g_pc[:, 1] = gv * f / z - g_jac[:, 1, 2] * f / z**2
    g_pc[:, 2] = (
        -gu * f * x / z**2 - gv * f * y / z**2
        - (g_jac[:, 0, 0] + g_jac[:, 1, 1]) * f / z**2
        + 2.0 * f * (g_jac[:, 0, 2] * x + g_jac[:, 1, 2] * y) / z**3
    )
    g_means = np.where(vis[:, None], g_pc @ cam.rotation, 0.0)
    g_covs = np.where(vis[:, None, None], g_covs, 0.0)
    return WorldGrads(g_means, g_covs, g_op, g_col)


def rotate_world(world: WorldKernels, rot: np.ndarray, center=(0.0, 0.0, 0.0)) -> WorldKernels:
    """Rigidly rotate world kernels about ``center``."""
    c = np.asarray(center, dtype=np.float64)
    means = (world.means - c) @ rot.T + c
    covs = rot @ world.covs @ rot.T
    return WorldKernels(means, covs, world.opacities.copy(), world.colors.copy())
