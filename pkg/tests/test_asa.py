import math

import numpy as np
import pytest

from headsplat.asa import (
    AdamState,
    AlignmentConfig,
    OptimizationDegenerateError,
    SupervisionView,
    adam_step,
    cosine_lr,
    evaluate,
    flame_reg,
    optimize_alignment,
    photometric_loss,
    running_minimum,
    write_trace_csv,
)
from headsplat.geometry import MeshParams, ParametricMesh, SimilarityTransform, camera_from_orbit
from headsplat.image import Image
from headsplat.splat import bind_kernels, globalize, render

from conftest import central_diff, rel_err

BG = (0.0, 0.0, 0.0)


def _toy(rng, n_params=2):
    """Five triangles around the origin, a couple of blendshapes and two cameras."""
    verts = np.array([[0, 0, 0.3], [0.5, 0, 0], [0, 0.5, 0], [-0.5, 0, 0], [0, -0.5, 0], [0.2, 0.2, -0.3]], float)
    tris = np.array([[0, 1, 2], [0, 2, 3], [0, 3, 4], [0, 4, 1], [1, 5, 2]])
    mesh = ParametricMesh(verts, rng.normal(size=(n_params, 6, 3)) * 0.05, tris)
    cloud = bind_kernels(verts, tris)
    cloud.colors = rng.uniform(0.2, 0.9, cloud.colors.shape)
    cloud.log_scales = np.log(rng.uniform(0.5, 0.9, cloud.log_scales.shape))
    cams = [camera_from_orbit(a, 10.0, 3.0, focal=90.0, resolution=(48, 48)) for a in (20.0, 160.0)]
    return mesh, cloud, cams


def _views(cloud, mesh, phi, cams, xf, kind="pseudo", weight=1.0):
    world = globalize(cloud, mesh.eval(phi), xf)
    return [SupervisionView(render(world, c, BG), c, kind, weight) for c in cams]


# -- loss terms ----------------------------------------------------------------------

def test_photometric_identical_is_zero(rng):
    a = rng.uniform(size=(16, 16, 3))
    loss, grad = photometric_loss(a, a.copy())
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_photometric_black_vs_white():
    loss, _ = photometric_loss(np.zeros((8, 8, 3)), np.ones((8, 8, 3)), w_l1=1.0, w_ssim=0.0)
    assert loss == 1.0


def test_photometric_resolution_mismatch():
    with pytest.raises(ValueError):
        photometric_loss(np.zeros((8, 8, 3)), np.zeros((8, 9, 3)))


def test_photometric_accepts_images(rng):
    a, b = rng.uniform(size=(12, 12, 3)), rng.uniform(size=(12, 12, 3))
    assert photometric_loss(Image(a), Image(b))[0] == photometric_loss(a, b)[0]


def test_photometric_gradient_matches_finite_differences(rng):
    a, b = rng.uniform(size=(14, 14, 3)), rng.uniform(size=(14, 14, 3))
    _, grad = photometric_loss(a, b)
    h = 1e-7
    for _ in range(10):
        idx = tuple(rng.integers(0, s) for s in a.shape)
        old = a[idx]
        a[idx] = old + h
        lp = photometric_loss(a, b)[0]
        a[idx] = old - h
        lm = photometric_loss(a, b)[0]
        a[idx] = old
        fd = (lp - lm) / (2 * h)
        assert abs(fd - grad[idx]) / abs(fd) < 1e-4


def test_flame_reg_cases(rng):
    phi = rng.normal(size=5)
    assert flame_reg(phi, phi, 0.5)[0] == 0.0
    e = np.zeros(5)
    e[0] = 1.0
    assert flame_reg(e, np.zeros(5), 0.5)[0] == 0.5
    with pytest.raises(ValueError):
        flame_reg(np.zeros(3), np.zeros(4), 0.5)


def test_flame_reg_gradient(rng):
    phi, orig = rng.normal(size=6), rng.normal(size=6)
    _, g = flame_reg(phi, orig, 0.7)
    fd = central_diff(lambda: flame_reg(phi, orig, 0.7)[0], phi, h=1e-4)
    assert rel_err(g, fd) < 1e-8
    # exactly linear in the displacement
    _, g2 = flame_reg(orig + 2 * (phi - orig), orig, 0.7)
    np.testing.assert_allclose(g2, 2 * g, rtol=1e-14, atol=1e-15)


def test_cosine_lr():
    assert cosine_lr(0, 100, 0.005) == 0.005
    assert cosine_lr(100, 100, 0.005) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(50, 100, 0.005) == pytest.approx(0.0025, rel=1e-12)
    with pytest.raises(ValueError):
        cosine_lr(101, 100, 0.005)


# -- Adam ----------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    x = np.array([1.0, -2.0])
    np.testing.assert_array_equal(adam_step(AdamState(), x, np.zeros(2), 0.1), x)


def test_adam_first_step_is_signed_lr():
    x = np.zeros(3)
    out = adam_step(AdamState(), x, np.array([3.0, -0.2, 1e-3]), 0.01)
    np.testing.assert_allclose(out, [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adam_quadratic_convergence():
    state, x = AdamState(), np.array([1.0])
    for _ in range(100):
        x = adam_step(state, x, 2 * x, 0.1)
    assert abs(x[0]) < 0.05


def test_adam_skips_non_finite():
    state = AdamState()
    x = adam_step(state, np.ones(2), np.ones(2), 0.1)
    m, v = state.m.copy(), state.v.copy()
    y = adam_step(state, x, np.array([np.nan, 1.0]), 0.1)
    np.testing.assert_array_equal(x, y)
    np.testing.assert_array_equal(state.m, m)
    np.testing.assert_array_equal(state.v, v)
    assert state.skipped == 1 and state.step == 1


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(AdamState(), np.zeros(2), np.zeros(3), 0.1)


# -- configuration -------------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [
    {"lr0": 0.0}, {"lambda_flame": -1.0}, {"lambda_pseudo": -0.1}, {"w_l1": 0.5, "w_ssim": 0.2},
    {"max_steps": -1}, {"kernel_fields": ("colors", "nope")}, {"schedule": "step"},
])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        AlignmentConfig(**kwargs)


def test_supervision_weights():
    cfg = AlignmentConfig()
    img, cam = Image(np.zeros((4, 4, 3))), camera_from_orbit(0, 0, 3, resolution=(4, 4))
    assert SupervisionView(img, cam, "real").effective_weight(cfg) == 1.0
    assert SupervisionView(img, cam, "pseudo").effective_weight(cfg) == 0.01
    with pytest.raises(ValueError):
        SupervisionView(img, cam, "other")


# -- optimisation --------------------------------------------------------------------

def test_transform_gradient_matches_finite_differences(rng):
    mesh, cloud, cams = _toy(rng)
    phi = MeshParams(rng.normal(size=2) * 0.3)
    target = SimilarityTransform([1.05, 0.97, 1.02], [0.05, 0.1, -0.03], [0.03, -0.02, 0.01])
    views = _views(cloud, mesh, phi.phi, cams, target)
    cfg = AlignmentConfig(background=BG)
    xf = SimilarityTransform([0.98, 1.01, 0.99], [0.02, 0.06, 0.0], [0.0, 0.01, -0.01])
    ev = evaluate(cloud, mesh, phi, xf, views, cfg)

    def loss():
        return evaluate(cloud, mesh, phi, xf, views, cfg, need_grad=False).total

    for name, g in (("s", ev.g_s), ("r", ev.g_r), ("t", ev.g_t)):
        fd = central_diff(loss, getattr(xf, name), h=1e-6)
        assert rel_err(g, fd) < 5e-3, name


def test_identity_fixed_point(rng):
    mesh, cloud, cams = _toy(rng)
    phi = MeshParams(np.zeros(2))
    views = _views(cloud, mesh, phi.phi, cams, None)
    cfg = AlignmentConfig(max_steps=30, train_kernels=False, background=BG)
    res = optimize_alignment(cloud, mesh, phi, views, cfg)
    ident = SimilarityTransform.identity()
    for name in ("s", "r", "t"):
        np.testing.assert_allclose(getattr(res.transform, name), getattr(ident, name), atol=1e-4)
    assert res.best_loss < 1e-6


def test_parameter_group_isolation(rng):
    mesh, cloud, cams = _toy(rng)
    phi = MeshParams(np.zeros(2))
    views = _views(cloud, mesh, phi.phi, cams, SimilarityTransform([1.1] * 3, [0, 0.2, 0], [0.05, 0, 0]))
    init = SimilarityTransform([0.95] * 3, [0.0, 0.05, 0.01], [0.01, 0.02, 0.0])
    for frozen in ("scale", "rotation", "translation"):
        cfg = AlignmentConfig(max_steps=5, return_best=False, background=BG, **{f"train_{frozen}": False})
        res = optimize_alignment(cloud, mesh, phi, views, cfg, xf_init=init)
        name = {"scale": "s", "rotation": "r", "translation": "t"}[frozen]
        np.testing.assert_array_equal(getattr(res.transform, name), getattr(init, name))
        moved = [n for n in ("s", "r", "t") if n != name]
        assert all(not np.array_equal(getattr(res.transform, n), getattr(init, n)) for n in moved)


def test_zero_pseudo_weight_contributes_nothing(rng):
    mesh, cloud, cams = _toy(rng)
    phi = MeshParams(rng.normal(size=2) * 0.2, np.zeros(2))
    real = _views(cloud, mesh, np.zeros(2), cams[:1], None, kind="real", weight=None)
    pseudo = _views(cloud, mesh, np.zeros(2), cams, SimilarityTransform([1.2] * 3), kind="pseudo", weight=None)
    cfg = AlignmentConfig(lambda_pseudo=0.0, background=BG)
    xf = SimilarityTransform([0.9, 1.0, 1.1], [0.1, 0, 0], [0, 0.1, 0])
    a = evaluate(cloud, mesh, phi, xf, real, cfg)
    b = evaluate(cloud, mesh, phi, xf, real + pseudo, cfg)
    assert a.total == b.total
    for name in ("g_s", "g_r", "g_t", "g_phi"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
    for f in a.g_cloud:
        np.testing.assert_array_equal(a.g_cloud[f], b.g_cloud[f])
    assert np.all(b.g_s == 0) and np.all(b.g_r == 0) and np.all(b.g_t == 0)


def test_flame_dominance_pulls_phi_back(rng):
    mesh, cloud, cams = _toy(rng)
    views = _views(cloud, mesh, np.array([0.8, -0.6]), cams, None, kind="real", weight=None)
    orig = np.zeros(2)
    start = np.array([0.5, -0.4])
    cfg = AlignmentConfig(max_steps=200, lr_phi=0.02, lambda_flame=1e3, train_kernels=False, background=BG)
    res = optimize_alignment(cloud, mesh, MeshParams(start, orig), views, cfg)
    assert np.linalg.norm(res.phi - orig) < 0.1 * np.linalg.norm(start - orig)


def test_running_minimum_is_nonincreasing(rng):
    mesh, cloud, cams = _toy(rng)
    views = _views(cloud, mesh, np.zeros(2), cams, SimilarityTransform([1.1] * 3, [0, 0.3, 0]))
    res = optimize_alignment(cloud, mesh, np.zeros(2), views, AlignmentConfig(max_steps=25, background=BG))
    run = running_minimum(res.trace)
    assert np.all(np.diff(run) <= 0)
    assert res.best_loss <= run[-1]


def test_degenerate_when_nothing_visible(rng):
    mesh, cloud, _ = _toy(rng)
    # placed on the far side of a point ahead of the mesh, looking away from it
    away = camera_from_orbit(180.0, 0.0, 3.0, target=(0.0, 0.0, 10.0), resolution=(32, 32))
    views = [SupervisionView(Image(np.zeros((32, 32, 3))), away, "pseudo", 1.0)]
    with pytest.raises(OptimizationDegenerateError):
        optimize_alignment(cloud, mesh, np.zeros(2), views, AlignmentConfig(max_steps=3, background=BG))


def test_requires_a_view(rng):
    mesh, cloud, _ = _toy(rng)
    with pytest.raises(ValueError):
        optimize_alignment(cloud, mesh, np.zeros(2), [], AlignmentConfig())


def test_rotation_reparameterisation_keeps_rotation(rng):
    mesh, cloud, cams = _toy(rng)
    views = _views(cloud, mesh, np.zeros(2), cams, None)
    init = SimilarityTransform(r=[0.0, math.pi - 1e-4, 0.0])
    cfg = AlignmentConfig(lr0=0.01, max_steps=2, schedule="constant", return_best=False, train_kernels=False,
                          train_phi=False, train_scale=False, train_translation=False, background=BG)
    res = optimize_alignment(cloud, mesh, np.zeros(2), views, cfg, xf_init=init)
    assert np.linalg.norm(res.transform.r) <= math.pi + 1e-12


def test_trace_csv(tmp_path, rng):
    mesh, cloud, cams = _toy(rng)
    views = _views(cloud, mesh, np.zeros(2), cams, None)
    res = optimize_alignment(cloud, mesh, np.zeros(2), views, AlignmentConfig(max_steps=3, background=BG))
    path = tmp_path / "trace.csv"
    write_trace_csv(res.trace, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,lr,total,photometric,flame"
    assert len(lines) == 4
    assert math.isclose(float(lines[1].split(",")[1]), 0.005)
