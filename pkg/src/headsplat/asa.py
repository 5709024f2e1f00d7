"""Spatial alignment of the avatar against pseudo back views.

A similarity transform (per-axis scale, rotation vector, translation) is applied
to the mesh vertices before rendering against pseudo views, and learned together
with the blendshape coefficients (kept near their initial value by a quadratic
prior) and, optionally, the kernel parameters. Real views are rendered without
the transform: they already live in the avatar's frame.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    Camera,
    MeshParams,
    ParametricMesh,
    SimilarityTransform,
    mesh_eval,
    mesh_eval_backward,
)
from .image import Image
from .metrics import ssim_and_grad
from .splat import CLOUD_FIELDS, SplatCloud, globalize, globalize_backward, render, render_backward

log = logging.getLogger(__name__)

# past this angle the rotation vector is swapped for the equivalent shorter one
REPARAM_ANGLE = math.pi


class OptimizationDegenerateError(RuntimeError):
    """Raised when no kernel is visible in any supervision view."""


@dataclass
class AlignmentConfig:
    lr0: float = 0.005
    lr_phi: float = 0.005
    lr_kernels: dict = field(default_factory=lambda: {
        "colors": 0.02, "opacity_logit": 0.05, "mu_local": 0.01, "log_scales": 0.01, "rot_local": 0.01,
    })
    max_steps: int = 300
    lambda_flame: float = 0.5
    lambda_pseudo: float = 0.01
    w_l1: float = 0.8
    w_ssim: float = 0.2
    schedule: str = "cosine"
    train_scale: bool = True
    train_rotation: bool = True
    train_translation: bool = True
    train_phi: bool = True
    train_kernels: bool = True
    kernel_fields: tuple = ("colors", "opacity_logit", "mu_local", "log_scales", "rot_local")
    views_per_step: int | None = None
    pseudo_per_step: int | None = None
    return_best: bool = True
    background: tuple = (0.0, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if self.lambda_flame < 0 or self.lambda_pseudo < 0:
            raise ValueError("loss weights must be non-negative")
        if not math.isclose(self.w_l1 + self.w_ssim, 1.0, abs_tol=1e-12):
            raise ValueError("w_l1 + w_ssim must equal 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be non-negative")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"schedule must be 'cosine' or 'constant', got {self.schedule!r}")
        self.kernel_fields = tuple(self.kernel_fields)
        unknown = set(self.kernel_fields) - set(CLOUD_FIELDS)
        if unknown:
            raise ValueError(f"unknown kernel fields {sorted(unknown)}")


@dataclass
class SupervisionView:
    image: Image
    camera: Camera
    kind: str = "real"  # "real" or "pseudo"
    weight: float | None = None

    def __post_init__(self):
        if self.kind not in ("real", "pseudo"):
            raise ValueError(f"view kind must be 'real' or 'pseudo', got {self.kind!r}")

    def effective_weight(self, cfg: AlignmentConfig) -> float:
        if self.weight is not None:
            return float(self.weight)
        return 1.0 if self.kind == "real" else cfg.lambda_pseudo


@dataclass
class AdamState:
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray, lr: float) -> np.ndarray:
    """One bias-corrected Adam update; returns the new parameters.

    A gradient with any non-finite entry leaves the parameters and moments
    untouched and increments ``state.skipped``.
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ValueError(f"parameter shape {params.shape} does not match gradient shape {grads.shape}")
    if not np.all(np.isfinite(grads)):
        state.skipped += 1
        log.warning("skipping Adam step on non-finite gradient (%d so far)", state.skipped)
        return params.copy()
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def cosine_lr(step: int, max_steps: int, lr0: float) -> float:
    if max_steps <= 0:
        return lr0
    if not 0 <= step <= max_steps:
        raise ValueError(f"step {step} outside [0, {max_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / max_steps))


def photometric_loss(rendered, target, w_l1=0.8, w_ssim=0.2):
    """``w_l1 * mean|a - b| + w_ssim * (1 - SSIM(a, b))`` and its gradient w.r.t. ``a``."""
    a = rendered.rgb if isinstance(rendered, Image) else np.asarray(rendered, dtype=np.float64)
    b = target.rgb if isinstance(target, Image) else np.asarray(target, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"resolution mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    loss = w_l1 * float(np.mean(np.abs(diff)))
    grad = (w_l1 / diff.size) * np.sign(diff)
    if w_ssim:
        s, g_s = ssim_and_grad(a, b)
        loss += w_ssim * (1.0 - s)
        grad = grad - w_ssim * g_s
    return loss, grad


def flame_reg(phi, phi_orig, lambda_flame):
    """Quadratic prior ``lambda * ||phi - phi_orig||^2`` and its gradient."""
    phi = np.asarray(phi, dtype=np.float64)
    phi_orig = np.asarray(phi_orig, dtype=np.float64)
    if phi.shape != phi_orig.shape:
        raise ValueError(f"dimension mismatch: {phi.shape} vs {phi_orig.shape}")
    d = phi - phi_orig
    return float(lambda_flame * (d @ d)), 2.0 * lambda_flame * d


@dataclass
class AlignmentResult:
    transform: SimilarityTransform
    phi: np.ndarray
    cloud: SplatCloud
    trace: list
    best_step: int
    best_loss: float
    skipped_steps: int = 0


@dataclass
class Evaluation:
    photometric: float
    flame: float
    g_s: np.ndarray
    g_r: np.ndarray
    g_t: np.ndarray
    g_phi: np.ndarray
    g_cloud: dict
    visible: bool

    @property
    def total(self) -> float:
        return self.photometric + self.flame


def evaluate(cloud: SplatCloud, mesh: ParametricMesh, phi: MeshParams, xf: SimilarityTransform,
             views, cfg: AlignmentConfig, need_grad=True) -> Evaluation:
    """Total loss over ``views`` and its gradient w.r.t. every parameter group."""
    vertices = mesh_eval(mesh, phi.phi)
    g_vertices = np.zeros_like(vertices)
    g_s, g_r, g_t = np.zeros(3), np.zeros(3), np.zeros(3)
    g_cloud = {f: np.zeros_like(getattr(cloud, f)) for f in CLOUD_FIELDS}
    photo = 0.0
    visible = False
    cache_by_kind = {}
    for view in views:
        weight = view.effective_weight(cfg)
        if weight == 0.0:
            continue
        use_xf = view.kind == "pseudo"
        if use_xf not in cache_by_kind:
            cache_by_kind[use_xf] = globalize(cloud, vertices, xf if use_xf else None, return_cache=True)
        world, cache = cache_by_kind[use_xf]
        img, ctx = render(world, view.camera, cfg.background, return_context=True)
        if ctx.projection is not None and len(ctx.projection.order):
            visible = True
        loss, g_img = photometric_loss(img, view.image, cfg.w_l1, cfg.w_ssim)
        photo += weight * loss
        if not need_grad:
            continue
        g_world = render_backward(world, view.camera, weight * g_img, ctx=ctx, background=cfg.background)
        g_v, g_c, g_xf = globalize_backward(cache, g_world)
        g_vertices += g_v
        for f in CLOUD_FIELDS:
            g_cloud[f] += getattr(g_c, f)
        if use_xf and g_xf is not None:
            g_s += g_xf[0]
            g_r += g_xf[1]
            g_t += g_xf[2]
    flame, g_phi = flame_reg(phi.phi, phi.phi_orig, cfg.lambda_flame)
    g_phi = g_phi + mesh_eval_backward(mesh, g_vertices)
    return Evaluation(photo, flame, g_s, g_r, g_t, g_phi, g_cloud, visible)


def _stochastic(views, cfg) -> bool:
    return _sample_views(views, cfg, None) is not views


def _sample_views(views, cfg: AlignmentConfig, rng):
    """Minibatch for one step. With ``pseudo_per_step`` set, real and pseudo
    views are drawn separately so every step sees both kinds."""
    if cfg.pseudo_per_step is None:
        groups = [(list(range(len(views))), cfg.views_per_step)]
    else:
        real = [i for i, v in enumerate(views) if v.kind == "real"]
        pseudo = [i for i, v in enumerate(views) if v.kind == "pseudo"]
        groups = [(real, cfg.views_per_step), (pseudo, cfg.pseudo_per_step)]
    if all(not k or k >= len(idx) for idx, k in groups):
        return views
    if rng is None:
        return []
    pick = []
    for idx, k in groups:
        if not k or k >= len(idx):
            pick += idx
        else:
            pick += [idx[i] for i in rng.choice(len(idx), k, replace=False)]
    return [views[i] for i in sorted(pick)]


def optimize_alignment(cloud: SplatCloud, mesh: ParametricMesh, phi, views, cfg: AlignmentConfig,
                       xf_init: SimilarityTransform | None = None) -> AlignmentResult:
    """Minimise the weighted photometric loss plus the blendshape prior.

    Scale, rotation, translation, blendshape coefficients and each kernel field
    have their own Adam state. Returns the parameters of the lowest total loss
    seen (or the final iterate when ``return_best`` is off).
    """
    views = list(views)
    if not views:
        raise ValueError("at least one supervision view is required")
    phi = phi if isinstance(phi, MeshParams) else MeshParams(phi)
    phi = MeshParams(phi.phi.copy(), phi.phi_orig.copy(), phi.cap)
    cloud = cloud.copy()
    xf = (xf_init or SimilarityTransform.identity()).copy()
    rng = np.random.default_rng(cfg.seed)
    states = {name: AdamState() for name in ("s", "r", "t", "phi", *CLOUD_FIELDS)}

    trace = []
    best = (math.inf, -1, xf.copy(), phi.phi.copy(), cloud.copy())
    for step in range(cfg.max_steps):
        lr_scale = cosine_lr(step, cfg.max_steps, 1.0) if cfg.schedule == "cosine" else 1.0
        batch = _sample_views(views, cfg, rng)
        ev = evaluate(cloud, mesh, phi, xf, batch, cfg)
        if step == 0 and not ev.visible:
            raise OptimizationDegenerateError("no kernel is visible in any supervision view")
        trace.append({"step": step, "lr": cfg.lr0 * lr_scale, "total": ev.total,
                      "photometric": ev.photometric, "flame": ev.flame})
        if ev.total < best[0]:
            best = (ev.total, step, xf.copy(), phi.phi.copy(), cloud.copy())

        lr = cfg.lr0 * lr_scale
        if cfg.train_scale:
            xf.s = np.maximum(adam_step(states["s"], xf.s, ev.g_s, lr), 1e-6)
        if cfg.train_rotation:
            xf.r = adam_step(states["r"], xf.r, ev.g_r, lr)
            theta = float(np.linalg.norm(xf.r))
            if theta > REPARAM_ANGLE:
                # same rotation, expressed with angle 2*pi - theta about the flipped axis;
                # the old moments refer to the other chart, so they are dropped
                xf.r = xf.r * (1.0 - 2.0 * math.pi / theta)
                states["r"] = AdamState(skipped=states["r"].skipped)
        if cfg.train_translation:
            xf.t = adam_step(states["t"], xf.t, ev.g_t, lr)
        if cfg.train_phi and phi.phi.size:
            phi.phi = adam_step(states["phi"], phi.phi, ev.g_phi, cfg.lr_phi * lr_scale)
            phi.clamp()
        if cfg.train_kernels:
            for f in cfg.kernel_fields:
                new = adam_step(states[f], getattr(cloud, f), ev.g_cloud[f], cfg.lr_kernels.get(f, 0.01) * lr_scale)
                setattr(cloud, f, new)
            cloud.project_constraints()

    # score the final iterate too so the returned parameters are never worse than it
    final = evaluate(cloud, mesh, phi, xf, views, cfg, need_grad=False)
    if cfg.max_steps == 0 or not cfg.return_best or _stochastic(views, cfg):
        best = (final.total, cfg.max_steps, xf, phi.phi, cloud)
    elif final.total <= best[0]:
        best = (final.total, cfg.max_steps, xf, phi.phi, cloud)
    skipped = sum(s.skipped for s in states.values())
    return AlignmentResult(best[2], best[3], best[4], trace, best[1], best[0], skipped)


def running_minimum(trace) -> np.ndarray:
    return np.minimum.accumulate([row["total"] for row in trace])


def write_trace_csv(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "total", "photometric", "flame"])
        for row in trace:
            writer.writerow([row["step"], repr(row["lr"]), repr(row["total"]), repr(row["photometric"]), repr(row["flame"])])
