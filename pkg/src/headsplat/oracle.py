"""Pseudo-supervision for unobserved regions.

A toy latent-conditioned generator stands in for a pretrained full-head model:
a template kernel cloud whose world-space means and colours are shifted by a
linear map of a latent code. The generator is adapted to a subject by two-phase
inversion (latent first, then the map itself) against a mix of captured images
and renders of the current avatar, and then sampled at back-facing cameras.
"""
from __future__ import annotations

import json
import logging
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import convolve, correlate

from .asa import AdamState, adam_step, cosine_lr
from .geometry import Camera, camera_from_orbit
from .image import Image, load_image, save_png
from .splat import SplatCloud, WorldKernels, globalize, render, render_backward

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
BACK_RANGE = (90.0, 270.0)

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


class HookError(RuntimeError):
    """The external refinement command failed."""

    def __init__(self, message, status):
        super().__init__(message)
        self.status = status


@dataclass
class GeneratorParams:
    """Template kernels plus a linear map from a latent code to per-kernel
    ``(dx, dy, dz, dr, dg, db)`` offsets, flattened kernel-major."""

    template: SplatCloud
    vertices: np.ndarray
    w: np.ndarray
    theta: np.ndarray
    background: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.w = np.asarray(self.w, dtype=np.float64).reshape(-1)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        self.background = tuple(float(x) for x in self.background)
        if self.theta.shape != (len(self.w), 6 * len(self.template)):
            raise ValueError(f"linear map must be {len(self.w)} x {6 * len(self.template)}, got {self.theta.shape}")
        if not (np.all(np.isfinite(self.w)) and np.all(np.isfinite(self.theta))):
            raise ValueError("generator parameters must be finite")

    @property
    def latent_dim(self) -> int:
        return len(self.w)

    def copy(self) -> "GeneratorParams":
        return GeneratorParams(self.template.copy(), self.vertices.copy(), self.w.copy(), self.theta.copy(), self.background)

    def offsets(self, w=None) -> np.ndarray:
        w = self.w if w is None else np.asarray(w, dtype=np.float64)
        return (w @ self.theta).reshape(-1, 6)

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "w": self.w.tolist(),
            "theta": self.theta.tolist(),
            "background": list(self.background),
            "vertices": self.vertices.tolist(),
            "template": self.template.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorParams":
        version = d.get("format_version")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported generator format_version {version!r}")
        template = SplatCloud.from_dict(d["template"])
        w = np.asarray(d["w"], dtype=np.float64)
        theta = np.asarray(d["theta"], dtype=np.float64).reshape(len(w), -1)
        return cls(template, np.asarray(d["vertices"], dtype=np.float64).reshape(-1, 3), w, theta, tuple(d["background"]))


def save_generator(g: GeneratorParams, path) -> None:
    Path(path).write_text(json.dumps(g.to_dict()))


def load_generator(path) -> GeneratorParams:
    return GeneratorParams.from_dict(json.loads(Path(path).read_text()))


def _base_world(g: GeneratorParams) -> WorldKernels:
    return globalize(g.template, g.vertices)


def materialize(g: GeneratorParams, base: WorldKernels | None = None):
    """World kernels for the current latent. Returns ``(world, unclipped colour mask)``."""
    base = _base_world(g) if base is None else base
    off = g.offsets()
    raw = base.colors + off[:, 3:]
    world = WorldKernels(base.means + off[:, :3], base.covs, base.opacities, np.clip(raw, 0.0, 1.0))
    return world, (raw > 0.0) & (raw < 1.0)


def generate(g: GeneratorParams, cam: Camera) -> Image:
    """Render the generator's subject at ``cam``."""
    world, _ = materialize(g)
    return render(world, cam, g.background)


# -- inversion -----------------------------------------------------------------------

@dataclass
class HybridItem:
    image: Image
    camera: Camera
    origin: str  # "ori" or "render"


@dataclass
class HybridSet:
    items: list = field(default_factory=list)

    @property
    def n_ori(self) -> int:
        return sum(1 for it in self.items if it.origin == "ori")

    @property
    def n_render(self) -> int:
        return sum(1 for it in self.items if it.origin == "render")

    def __len__(self) -> int:
        return len(self.items)


def build_hybrid_set(ori_views, avatar_renders=()) -> HybridSet:
    """Tag captured ``(image, camera)`` pairs as ``ori`` and avatar renders as ``render``."""
    ori_views, avatar_renders = list(ori_views), list(avatar_renders)
    if not ori_views:
        raise ValueError("the hybrid set needs at least one captured view")
    items = [HybridItem(img, cam, "ori") for img, cam in ori_views]
    items += [HybridItem(img, cam, "render") for img, cam in avatar_renders]
    return HybridSet(items)


@dataclass
class InversionConfig:
    steps_w: int = 150
    steps_theta: int = 40
    lr_w: float = 0.05
    lr_theta: float = 5e-5
    lambda_latent: float = 1e-3
    lambda_grad: float = 0.1
    views_per_step: int | None = None
    ori_views: int | None = 2  # captured views nearest the front that enter the hybrid set; None keeps all
    seed: int = 0

    def __post_init__(self):
        if self.steps_w < 0 or self.steps_theta < 0:
            raise ValueError("step counts must be non-negative")
        if not (self.lr_w > 0 and self.lr_theta > 0):
            raise ValueError("learning rates must be positive")
        if self.lambda_latent < 0 or self.lambda_grad < 0:
            raise ValueError("loss weights must be non-negative")
        if self.ori_views is not None and self.ori_views < 1:
            raise ValueError("ori_views must be >= 1")


def _sobel(x):
    return correlate(x, _SOBEL_X[..., None], mode="constant"), correlate(x, _SOBEL_Y[..., None], mode="constant")


def image_loss(rendered: np.ndarray, target: np.ndarray, lambda_grad: float):
    """Mean L1 plus ``lambda_grad`` times the mean L1 between Sobel responses."""
    diff = rendered - target
    loss = float(np.mean(np.abs(diff)))
    grad = np.sign(diff) / diff.size
    if lambda_grad:
        gx, gy = _sobel(diff)
        loss += lambda_grad * float(np.mean(np.abs(gx)) + np.mean(np.abs(gy)))
        # the adjoint of a zero-padded correlation is the zero-padded convolution
        grad = grad + (lambda_grad / diff.size) * (
            convolve(np.sign(gx), _SOBEL_X[..., None], mode="constant")
            + convolve(np.sign(gy), _SOBEL_Y[..., None], mode="constant")
        )
    return loss, grad


def inversion_loss(g: GeneratorParams, items, cfg: InversionConfig, need_grad=True, base=None):
    """Mean per-image loss plus the latent prior; gradients w.r.t. ``w`` and ``theta``."""
    base = _base_world(g) if base is None else base
    world, mask = materialize(g, base)
    total = 0.0
    g_off = np.zeros((len(world), 6))
    for it in items:
        if need_grad:
            img, ctx = render(world, it.camera, g.background, return_context=True)
        else:
            img = render(world, it.camera, g.background)
        loss, g_img = image_loss(img.rgb, it.image.rgb, cfg.lambda_grad)
        total += loss / len(items)
        if need_grad:
            gw = render_backward(world, it.camera, g_img / len(items), ctx=ctx, background=g.background)
            g_off[:, :3] += gw.means
            g_off[:, 3:] += gw.colors * mask
    total += cfg.lambda_latent * float(g.w @ g.w)
    if not need_grad:
        return total, None, None
    flat = g_off.reshape(-1)
    g_w = g.theta @ flat + 2.0 * cfg.lambda_latent * g.w
    g_theta = np.outer(g.w, flat)
    return total, g_w, g_theta


@dataclass
class InversionReport:
    initial_loss: float
    final_loss: float
    trace: list


def invert(g0: GeneratorParams, hybrid: HybridSet, cfg: InversionConfig):
    """Fit the latent with the map frozen, then fine-tune the map around it.

    Returns ``(params, report)``. Each phase keeps its lowest-loss iterate, so the
    final loss never exceeds the initial one.
    """
    items = list(hybrid.items) if isinstance(hybrid, HybridSet) else list(hybrid)
    if not items:
        raise ValueError("cannot invert against an empty hybrid set")
    g = g0.copy()
    base = _base_world(g)
    rng = np.random.default_rng(cfg.seed)
    stochastic = bool(cfg.views_per_step) and cfg.views_per_step < len(items)
    initial, _, _ = inversion_loss(g, items, cfg, need_grad=False, base=base)
    trace = [("init", 0, initial)]
    best = initial

    for phase, steps, lr0 in (("w", cfg.steps_w, cfg.lr_w), ("theta", cfg.steps_theta, cfg.lr_theta)):
        state = AdamState()
        best_params = g.w.copy() if phase == "w" else g.theta.copy()
        for step in range(steps):
            batch = items
            if stochastic:
                batch = [items[i] for i in np.sort(rng.choice(len(items), cfg.views_per_step, replace=False))]
            loss, g_w, g_theta = inversion_loss(g, batch, cfg, base=base)
            if not stochastic:
                trace.append((phase, step, loss))
                if loss < best:
                    best = loss
                    best_params = g.w.copy() if phase == "w" else g.theta.copy()
            lr = cosine_lr(step, steps, lr0)
            if phase == "w":
                g.w = adam_step(state, g.w, g_w, lr)
            else:
                g.theta = adam_step(state, g.theta, g_theta, lr)
        final, _, _ = inversion_loss(g, items, cfg, need_grad=False, base=base)
        trace.append((phase, steps, final))
        if final <= best:
            best = final
        elif phase == "w":
            g.w = best_params
        else:
            g.theta = best_params
    return g, InversionReport(initial, best, trace)


# -- back views ----------------------------------------------------------------------

def sample_back_cameras(count, elevation=0.0, radius=4.0, target=(0.0, 0.0, 0.0), focal=150.0,
                        resolution=(128, 128), seed=None) -> list:
    """Cameras over azimuths [90, 270]: evenly spaced, or uniform random when ``seed`` is given."""
    if count < 1:
        raise ValueError("count must be >= 1")
    lo, hi = BACK_RANGE
    if seed is not None:
        az = np.random.default_rng(seed).uniform(lo, hi, count)
    elif count == 1:
        az = np.array([0.5 * (lo + hi)])
    else:
        az = np.linspace(lo, hi, count)
    return [camera_from_orbit(float(a), elevation, radius, target, focal, resolution) for a in az]


def run_hook(hook, image: Image, workdir=None) -> Image:
    """Pass ``image`` through an external command invoked as ``hook + [in.png, out.png]``."""
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        src, dst = Path(tmp) / "in.png", Path(tmp) / "out.png"
        save_png(image, src)
        proc = subprocess.run([*hook, str(src), str(dst)], capture_output=True, text=True)
        if proc.returncode != 0:
            raise HookError(f"refinement hook exited with status {proc.returncode}: {proc.stderr.strip()}",
                            proc.returncode)
        if not dst.exists():
            raise HookError("refinement hook did not write its output image", proc.returncode)
        out = load_image(dst)
    if out.rgb.shape != image.rgb.shape:
        raise HookError(f"refinement hook changed the image size to {out.rgb.shape[:2]}", 0)
    return out


def synthesize_back_views(g: GeneratorParams, cams, hook=None, workdir=None) -> list:
    """One generated image per camera, optionally refined by an external command."""
    cams = list(cams)
    if not cams:
        raise ValueError("no cameras to synthesize")
    world, _ = materialize(g)
    out = []
    for cam in cams:
        img = render(world, cam, g.background)
        if hook:
            img = run_hook(hook, img, workdir)
        out.append((img, cam))
    return out
