"""The bundled synthetic subject.

A low-poly head (deformed icosphere, 320 faces) with eight smooth blendshapes,
a ground-truth appearance that is fully known from every direction, and a toy
generator whose latent space spans the subject's hair and skin variation. The
generator lives in its own coordinate frame, offset from the avatar frame by a
small similarity transform, as a pretrained model's canonical frame would be.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Camera, ParametricMesh, SimilarityTransform, apply_transform, camera_from_orbit, triangle_frames
from .oracle import GeneratorParams
from .splat import SplatCloud, bind_kernels, globalize, logit, render

LATENT_DIM = 16
NUM_BLENDSHAPES = 8
SCENE_RADIUS = 1.0
CAMERA_RADIUS = 4.0
FOCAL = 150.0
BACKGROUND = (1.0, 1.0, 1.0)

SKIN = np.array([0.86, 0.68, 0.57])
HAIR = np.array([0.36, 0.25, 0.17])
LIP = np.array([0.72, 0.36, 0.36])
EYE = np.array([0.12, 0.10, 0.10])

# scene construction is fixed; run seeds only perturb tracking and optimisation
_SUBJECT_SEED = 20240611


def icosphere(subdivisions=2):
    """Unit icosphere (162 vertices and 320 faces at two subdivisions)."""
    t = (1.0 + 5**0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
             (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return np.array(verts), np.array(faces, dtype=np.int64)


def _bump(d, center, width):
    c = np.asarray(center, float)
    c = c / np.linalg.norm(c)
    return np.exp(-np.sum((d - c) ** 2, axis=-1) / (2 * width**2))


def head_mesh() -> ParametricMesh:
    """Head-shaped mesh with blendshapes for jaw, smile, brows, width, depth,
    height, nose and cheeks."""
    d, tris = icosphere(2)
    base = d * np.array([0.85, 1.05, 0.95])
    base += 0.12 * _bump(d, (0, -0.05, 1), 0.18)[:, None] * np.array([0, 0, 1.0])
    lower_front = _bump(d, (0, -0.7, 0.7), 0.35)[:, None]
    corners = (_bump(d, (0.35, -0.4, 0.85), 0.2) + _bump(d, (-0.35, -0.4, 0.85), 0.2))[:, None]
    brow = _bump(d, (0, 0.35, 0.9), 0.3)[:, None]
    cheeks = (_bump(d, (0.6, -0.15, 0.75), 0.25) + _bump(d, (-0.6, -0.15, 0.75), 0.25))[:, None]
    nose = _bump(d, (0, -0.05, 1), 0.18)[:, None]
    shapes = np.stack([
        0.10 * lower_front * np.array([0, -1.0, 0.2]),
        0.06 * corners * np.array([0, 0.5, -0.3]) + 0.04 * corners * d * np.array([1, 0, 0]),
        0.06 * brow * np.array([0, 1.0, 0.1]),
        0.08 * d * np.array([1, 0, 0]),
        0.08 * d * np.array([0, 0, 1]),
        0.08 * d * np.array([0, 1, 0]),
        0.08 * nose * np.array([0, -0.2, 1.0]),
        0.06 * cheeks * d,
    ])
    return ParametricMesh(base, shapes, tris)


def _directions(mesh: ParametricMesh, cloud: SplatCloud):
    """Unit direction of each kernel's triangle centre on the undeformed sphere."""
    centers = triangle_frames(mesh.base_vertices, mesh.triangles).centers[cloud.binding]
    centers = centers / np.array([0.85, 1.05, 0.95])
    return centers / np.linalg.norm(centers, axis=1, keepdims=True)


def region_masks(d):
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    face = (z > 0.3) & (y < 0.5) & (y > -0.8) & (np.abs(x) < 0.8)
    neck = (y < -0.75) & ~face
    hair = ~face & ~neck
    return face, hair, neck


def latent_basis(d) -> np.ndarray:
    """Per-kernel generator offsets for each latent dimension, shape (D, K, 6)."""
    face, hair, _ = region_masks(d)
    hf, ff = hair.astype(float), face.astype(float)
    az = np.arctan2(d[:, 0], d[:, 2])
    y = d[:, 1]
    basis = np.zeros((LATENT_DIM, len(d), 6))
    for i in range(3):
        basis[i, :, 3 + i] = 0.07 * hf
        basis[3 + i, :, 3 + i] = 0.03 * ff
    lum = np.array([1.0, 0.85, 0.7])
    patterns = [np.cos(az), np.sin(az), np.cos(2 * az), np.sin(2 * az), y, y * np.cos(az)]
    for j, p in enumerate(patterns):
        basis[6 + j, :, 3:] = 0.06 * (hf * p)[:, None] * lum
    basis[12, :, :3] = 0.02 * hf[:, None] * d
    basis[13, :, :3] = 0.02 * (y * hf)[:, None] * d
    basis[14, :, 3:] = 0.04 * (ff * d[:, 0])[:, None] * lum
    basis[15, :, 3:] = 0.04 * (ff * d[:, 1])[:, None] * lum
    return basis


def template_colors(d) -> np.ndarray:
    face, hair, neck = region_masks(d)
    colors = np.where(hair[:, None], HAIR, SKIN)
    colors = np.where(neck[:, None], SKIN * 0.9, colors)
    eyes = (_bump(d, (0.32, 0.22, 0.92), 0.08) + _bump(d, (-0.32, 0.22, 0.92), 0.08)) > 0.5
    mouth = _bump(d, (0, -0.45, 0.9), 0.1) > 0.5
    colors[eyes] = EYE
    colors[mouth] = LIP
    return colors


@dataclass
class Subject:
    mesh: ParametricMesh
    truth: SplatCloud
    phi_true: np.ndarray
    generator: GeneratorParams
    generator_frame: SimilarityTransform
    w_true: np.ndarray
    background: tuple = BACKGROUND

    def truth_vertices(self) -> np.ndarray:
        return self.mesh.eval(self.phi_true)

    def render_truth(self, cam: Camera):
        return render(globalize(self.truth, self.truth_vertices()), cam, self.background)

    def generator_camera(self, cam: Camera) -> Camera:
        """The same viewpoint expressed in the generator's frame, as the
        generator's own pose estimate for a captured image would be."""
        return frame_camera(self.generator_frame, cam)


def frame_camera(frame: SimilarityTransform, cam: Camera) -> Camera:
    """Move an orbit camera by a frame made of uniform scale, a turn about the
    vertical axis and a translation; the rendered view is unchanged."""
    s = frame.s
    if not (np.allclose(s, s[0]) and frame.r[0] == 0.0 and frame.r[2] == 0.0):
        raise ValueError("orbit cameras can only follow uniform scale, vertical turns and translations")
    target = apply_transform(frame.to_matrix(), cam.target[None])[0]
    return camera_from_orbit((cam.azimuth + np.rad2deg(frame.r[1])) % 360.0, cam.elevation, cam.radius * s[0],
                             target, cam.focal, cam.resolution)


def make_subject() -> Subject:
    """Build the bundled subject deterministically."""
    rng = np.random.default_rng(_SUBJECT_SEED)
    mesh = head_mesh()
    cloud = bind_kernels(mesh.base_vertices, mesh.triangles)
    d = _directions(mesh, cloud)
    n = len(cloud)
    # flat kernels hugging the surface (column 1 of each frame is the normal)
    cloud.log_scales = np.tile(np.log([0.75, 0.25, 0.75]), (n, 1))
    cloud.opacity_logit = np.full(n, logit(0.97))
    cloud.colors = template_colors(d)
    basis = latent_basis(d)
    theta = basis.reshape(LATENT_DIM, -1)

    w_true = np.clip(rng.normal(size=LATENT_DIM), -2.0, 2.0)
    phi_true = rng.normal(size=NUM_BLENDSHAPES) * 0.5
    truth = cloud.copy()
    off = (w_true @ theta).reshape(n, 6)
    face = region_masks(d)[0]
    residual = np.where(face[:, None], rng.normal(size=(n, 3)) * 0.04, 0.0)
    truth.colors = np.clip(cloud.colors + off[:, 3:] + residual, 0.0, 1.0)
    # geometric offsets become local mean offsets on the truth cloud
    frames = triangle_frames(mesh.eval(phi_true), mesh.triangles)
    rot, sig = frames.rotations[cloud.binding], frames.scales[cloud.binding]
    truth.mu_local = np.einsum("nji,nj->ni", rot, off[:, :3]) / sig[:, None]

    frame = SimilarityTransform(s=np.full(3, 1.03), r=np.array([0.0, np.deg2rad(3.0), 0.0]),
                                t=np.array([0.02, -0.01, 0.03]))
    gen_vertices = apply_transform(frame.to_matrix(), mesh.eval(phi_true))
    generator = GeneratorParams(cloud, gen_vertices, np.zeros(LATENT_DIM), theta, BACKGROUND)
    return Subject(mesh, truth, phi_true, generator, frame, w_true)


def frontal_cameras(count=16, span=120.0, elevation=0.0, resolution=(128, 128), focal=FOCAL,
                    radius=CAMERA_RADIUS) -> list:
    """``count`` cameras evenly spread over ``span`` degrees centred on the face."""
    if count == 1:
        az = np.array([0.0])
    else:
        az = np.linspace(-span / 2, span / 2, count)
    return [camera_from_orbit(float(a) % 360.0, elevation, radius, focal=focal, resolution=resolution) for a in az]


def back_camera(azimuth=180.0, elevation=0.0, resolution=(128, 128), focal=FOCAL, radius=CAMERA_RADIUS) -> Camera:
    return camera_from_orbit(azimuth, elevation, radius, focal=focal, resolution=resolution)
