"""Rotations, similarity transforms, blendshape meshes, triangle frames and cameras.

Everything here works on plain ``numpy`` float64 arrays and is side-effect free.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-4
EPS_AREA = 1e-10
EPS_NEAR = 1e-3


def _as_vec3(x, name="vector") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.shape != (3,):
        raise ValueError(f"{name} must have shape (3,), got {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"{name} must be finite, got {v}")
    return v


def skew(v) -> np.ndarray:
    """Cross-product matrix ``[v]x`` so that ``skew(v) @ u == cross(v, u)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def _rodrigues_coeffs(theta: float):
    # A = sin(t)/t, B = (1-cos t)/t^2 and their derivatives divided by t
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        a = 1.0 - t2 / 6.0
        b = 0.5 - t2 / 24.0
        da = -1.0 / 3.0 + t2 / 30.0
        db = -1.0 / 12.0 + t2 / 180.0
    else:
        s, c = np.sin(theta), np.cos(theta)
        half = np.sin(0.5 * theta)
        one_minus_c = 2.0 * half * half
        t2 = theta * theta
        a = s / theta
        b = one_minus_c / t2
        da = (theta * c - s) / (t2 * theta)
        db = (theta * s - 2.0 * one_minus_c) / (t2 * t2)
    return a, b, da, db


def rodrigues_exp(r) -> np.ndarray:
    """Rotation matrix for the axis-angle vector ``r`` (radians)."""
    r = _as_vec3(r, "rotation vector")
    theta = float(np.linalg.norm(r))
    a, b, _, _ = _rodrigues_coeffs(theta)
    k = skew(r)
    return np.eye(3) + a * k + b * (k @ k)


def rodrigues_jacobian(r, v) -> np.ndarray:
    """Jacobian ``d(R(r) v) / dr`` as a 3x3 matrix (column j is the partial wrt r_j)."""
    r = _as_vec3(r, "rotation vector")
    v = _as_vec3(v, "v")
    theta = float(np.linalg.norm(r))
    a, b, da, db = _rodrigues_coeffs(theta)
    rxv = np.cross(r, v)
    rxrxv = np.cross(r, rxv)
    rv = float(r @ v)
    # d(r x v)/dr = -[v]x ; d(r x (r x v))/dr = (r.v) I + r v^T - 2 v r^T
    return (
        -a * skew(v)
        + da * np.outer(rxv, r)
        + b * (rv * np.eye(3) + np.outer(r, v) - 2.0 * np.outer(v, r))
        + db * np.outer(rxrxv, r)
    )


def rotation_vjp(r, g_rot: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. the entries of ``rodrigues_exp(r)`` back to ``r``."""
    g = np.zeros(3)
    for c in range(3):
        e = np.zeros(3)
        e[c] = 1.0
        g += rodrigues_jacobian(r, e).T @ g_rot[:, c]
    return g


def rodrigues_exp_batch(r: np.ndarray) -> np.ndarray:
    """Vectorised :func:`rodrigues_exp` for an ``(n, 3)`` array."""
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r, axis=1)
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(t) / t)
    half = np.sin(0.5 * t)
    b = np.where(small, 0.5 - t2 / 24.0, 2.0 * half * half / (t * t))
    k = np.zeros((len(r), 3, 3))
    k[:, 0, 1], k[:, 0, 2] = -r[:, 2], r[:, 1]
    k[:, 1, 0], k[:, 1, 2] = r[:, 2], -r[:, 0]
    k[:, 2, 0], k[:, 2, 1] = -r[:, 1], r[:, 0]
    return np.eye(3) + a[:, None, None] * k + b[:, None, None] * (k @ k)


def rotation_vjp_batch(r: np.ndarray, g_rot: np.ndarray) -> np.ndarray:
    """Vectorised :func:`rotation_vjp` for ``(n, 3)`` vectors and ``(n, 3, 3)`` gradients."""
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r, axis=1)
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    s, c = np.sin(t), np.cos(t)
    half = np.sin(0.5 * t)
    omc = 2.0 * half * half
    a = np.where(small, 1.0 - t2 / 6.0, s / t)
    b = np.where(small, 0.5 - t2 / 24.0, omc / (t * t))
    da = np.where(small, -1.0 / 3.0 + t2 / 30.0, (t * c - s) / (t**3))
    db = np.where(small, -1.0 / 12.0 + t2 / 180.0, (t * s - 2.0 * omc) / (t**4))
    # R = I + a K + b K^2 ; dR/dr_j = a dK_j + b (dK_j K + K dK_j) + (da K + db K^2) r_j
    k = np.zeros((len(r), 3, 3))
    k[:, 0, 1], k[:, 0, 2] = -r[:, 2], r[:, 1]
    k[:, 1, 0], k[:, 1, 2] = r[:, 2], -r[:, 0]
    k[:, 2, 0], k[:, 2, 1] = -r[:, 1], r[:, 0]
    k2 = k @ k
    out = np.empty((len(r), 3))
    common = np.einsum("nab,nab->n", g_rot, da[:, None, None] * k + db[:, None, None] * k2)
    for j in range(3):
        dk = skew(np.eye(3)[j])
        term = a[:, None, None] * dk + b[:, None, None] * (dk @ k + k @ dk)
        out[:, j] = np.einsum("nab,nab->n", g_rot, term) + common * r[:, j]
    return out


def rotation_to_vector(rot: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rodrigues_exp` returning the vector with angle in ``[0, pi]``."""
    cos_t = np.clip(0.5 * (np.trace(rot) - 1.0), -1.0, 1.0)
    theta = float(np.arccos(cos_t))
    w = np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]])
    if theta < SMALL_ANGLE:
        return 0.5 * w
    if np.pi - theta < 1e-6:
        m = 0.5 * (rot + np.eye(3))
        axis = np.sqrt(np.clip(np.diag(m), 0.0, None))
        i = int(np.argmax(axis))
        axis = m[i] / axis[i]
        return theta * axis / np.linalg.norm(axis)
    return theta / (2.0 * np.sin(theta)) * w


@dataclass
class SimilarityTransform:
    """Per-axis scale ``s``, rotation vector ``r`` and translation ``t``."""

    s: np.ndarray = field(default_factory=lambda: np.ones(3))
    r: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.s = np.array(self.s, dtype=np.float64).reshape(3)
        self.r = np.array(self.r, dtype=np.float64).reshape(3)
        self.t = np.array(self.t, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls()

    def copy(self) -> "SimilarityTransform":
        return SimilarityTransform(self.s.copy(), self.r.copy(), self.t.copy())

    def to_matrix(self) -> np.ndarray:
        return to_matrix(self)

    def is_identity(self) -> bool:
        return bool(np.all(self.s == 1.0) and np.all(self.r == 0.0) and np.all(self.t == 0.0))

    def to_dict(self) -> dict:
        return {"s": self.s.tolist(), "r": self.r.tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "SimilarityTransform":
        return cls(d["s"], d["r"], d["t"])


def to_matrix(xf: SimilarityTransform) -> np.ndarray:
    """4x4 homogeneous matrix ``[R diag(s), t; 0, 1]``."""
    s = _as_vec3(xf.s, "scale")
    if np.any(s <= 0):
        raise ValueError(f"scale components must be positive, got {s}")
    out = np.eye(4)
    out[:3, :3] = rodrigues_exp(xf.r) * s[None, :]
    out[:3, 3] = _as_vec3(xf.t, "translation")
    return out


def apply_transform(T: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    T = np.asarray(T, dtype=np.float64)
    v = np.asarray(vertices, dtype=np.float64)
    if T.shape != (4, 4) or not np.array_equal(T[3], [0.0, 0.0, 0.0, 1.0]):
        raise ValueError("transform must be a 4x4 affine matrix with bottom row (0, 0, 0, 1)")
    if np.array_equal(T, np.eye(4)):
        return v.copy()
    return v @ T[:3, :3].T + T[:3, 3]


def transform_backward(xf: SimilarityTransform, vertices: np.ndarray, g_out: np.ndarray):
    """Gradients of ``apply_transform(to_matrix(xf), vertices)``.

    Returns ``(g_vertices, g_s, g_r, g_t)``.
    """
    rot = rodrigues_exp(xf.r)
    m = rot * xf.s[None, :]
    g_m = g_out.T @ vertices
    g_t = g_out.sum(axis=0)
    g_s = np.einsum("ij,ij->j", rot, g_m)
    g_rot = g_m * xf.s[None, :]
    g_r = rotation_vjp(xf.r, g_rot)
    return g_out @ m, g_s, g_r, g_t


@dataclass
class ParametricMesh:
    """Linear blendshape mesh: ``V(phi) = base + sum_k phi_k B_k``."""

    base_vertices: np.ndarray
    blendshapes: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.base_vertices = np.asarray(self.base_vertices, dtype=np.float64)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        n = len(self.base_vertices)
        if self.blendshapes is None or len(self.blendshapes) == 0:
            self.blendshapes = np.zeros((0, n, 3))
        self.blendshapes = np.asarray(self.blendshapes, dtype=np.float64)
        if self.blendshapes.shape[1:] != (n, 3):
            raise ValueError(f"blendshapes must be K x {n} x 3, got {self.blendshapes.shape}")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= n):
            raise ValueError("triangle index out of range")

    @property
    def num_params(self) -> int:
        return self.blendshapes.shape[0]

    def eval(self, phi) -> np.ndarray:
        return mesh_eval(self, phi)


@dataclass
class MeshParams:
    """Blendshape coefficients together with the copy taken at initialisation."""

    phi: np.ndarray
    phi_orig: np.ndarray = None
    cap: float = 10.0

    def __post_init__(self):
        self.phi = np.array(self.phi, dtype=np.float64).reshape(-1)
        self.phi_orig = self.phi.copy() if self.phi_orig is None else np.array(self.phi_orig, dtype=np.float64).reshape(-1)
        if self.phi.shape != self.phi_orig.shape:
            raise ValueError("phi and phi_orig must have the same length")
        if not np.all(np.isfinite(self.phi)):
            raise ValueError("mesh parameters must be finite")

    def clamp(self) -> None:
        norm = np.linalg.norm(self.phi)
        if norm > self.cap:
            self.phi *= self.cap / norm


def mesh_eval(mesh: ParametricMesh, phi) -> np.ndarray:
    if isinstance(phi, MeshParams):
        phi = phi.phi
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != (mesh.num_params,):
        raise ValueError(f"expected {mesh.num_params} mesh parameters, got shape {phi.shape}")
    return mesh.base_vertices + np.tensordot(phi, mesh.blendshapes, axes=1)


def mesh_eval_backward(mesh: ParametricMesh, g_vertices: np.ndarray) -> np.ndarray:
    return np.tensordot(mesh.blendshapes, g_vertices, axes=([1, 2], [0, 1]))


@dataclass
class TriangleFrames:
    centers: np.ndarray  # (M, 3)
    rotations: np.ndarray  # (M, 3, 3), columns: edge, normal, edge x normal
    scales: np.ndarray  # (M,)
    degenerate: np.ndarray  # (M,) bool


def _normalize(x):
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.where(n > 0, n, 1.0), n


def triangle_frames(vertices: np.ndarray, triangles: np.ndarray) -> TriangleFrames:
    v = np.asarray(vertices, dtype=np.float64)
    tri = np.asarray(triangles)
    v0, v1, v2 = v[tri[:, 0]], v[tri[:, 1]], v[tri[:, 2]]
    centers = (v0 + v1 + v2) / 3.0
    e1, e2 = v1 - v0, v2 - v0
    nraw = np.cross(e1, e2)
    tangent, _ = _normalize(e1)
    normal, nlen = _normalize(nraw)
    area = 0.5 * nlen[:, 0]
    degenerate = area < EPS_AREA
    rot = np.stack([tangent, normal, np.cross(tangent, normal)], axis=-1)
    rot[degenerate] = np.eye(3)
    scales = np.sqrt(area)
    return TriangleFrames(centers, rot, scales, degenerate)


def triangle_frames_backward(vertices, triangles, frames: TriangleFrames, g_centers, g_rot, g_scales):
    """Vertex gradient of the per-triangle centers, frames and scales."""
    v = np.asarray(vertices, dtype=np.float64)
    tri = np.asarray(triangles)
    v0, v1, v2 = v[tri[:, 0]], v[tri[:, 1]], v[tri[:, 2]]
    e1, e2 = v1 - v0, v2 - v0
    nraw = np.cross(e1, e2)
    tangent, elen = _normalize(e1)
    normal, nlen = _normalize(nraw)
    ok = ~frames.degenerate

    g_t = g_rot[:, :, 0].copy()
    g_n = g_rot[:, :, 1].copy()
    g_m = g_rot[:, :, 2]
    # m = t x n
    g_t += np.cross(normal, g_m)
    g_n += np.cross(g_m, tangent)
    # normalisation VJPs
    g_e1 = (g_t - tangent * np.sum(tangent * g_t, axis=1, keepdims=True)) / np.where(elen > 0, elen, 1.0)
    g_nraw = (g_n - normal * np.sum(normal * g_n, axis=1, keepdims=True)) / np.where(nlen > 0, nlen, 1.0)
    # sigma = sqrt(|nraw| / 2)
    safe_sigma = np.where(ok, frames.scales, 1.0)
    g_nraw += (g_scales / (4.0 * safe_sigma))[:, None] * normal
    g_e1 = np.where(ok[:, None], g_e1, 0.0)
    g_nraw = np.where(ok[:, None], g_nraw, 0.0)
    g_e1 = g_e1 + np.cross(e2, g_nraw)
    g_e2 = np.cross(g_nraw, e1)

    g_c = g_centers / 3.0
    out = np.zeros_like(v)
    np.add.at(out, tri[:, 0], g_c - g_e1 - g_e2)
    np.add.at(out, tri[:, 1], g_c + g_e1)
    np.add.at(out, tri[:, 2], g_c + g_e2)
    return out


def rotate_about_vertical(angle_deg: float) -> np.ndarray:
    """Rotation about the +y (up) axis; maps +z toward +x for positive angles."""
    a = np.deg2rad(angle_deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass
class Camera:
    azimuth: float
    elevation: float
    radius: float
    target: np.ndarray
    focal: float
    resolution: tuple  # (width, height)

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"camera radius must be positive, got {self.radius}")
        self.target = np.asarray(self.target, dtype=np.float64).reshape(3)
        self.resolution = (int(self.resolution[0]), int(self.resolution[1]))
        if min(self.resolution) <= 0:
            raise ValueError(f"resolution must be positive, got {self.resolution}")
        az, el = np.deg2rad(self.azimuth), np.deg2rad(self.elevation)
        offset = np.array([np.sin(az) * np.cos(el), np.sin(el), np.cos(az) * np.cos(el)])
        self.position = self.target + self.radius * offset
        forward = -offset
        up = np.array([0.0, 1.0, 0.0])
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-9:
            # looking straight up or down; orbit the up vector with the azimuth
            right = np.array([np.cos(az), 0.0, -np.sin(az)])
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        # rows map world offsets into camera coordinates (x right, y down, z forward)
        self.rotation = np.stack([right, down, forward])

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.position) @ self.rotation.T

    def to_dict(self) -> dict:
        return {
            "azimuth": float(self.azimuth),
            "elevation": float(self.elevation),
            "radius": float(self.radius),
            "target": self.target.tolist(),
            "focal": float(self.focal),
            "resolution": list(self.resolution),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["azimuth"], d["elevation"], d["radius"], d["target"], d["focal"], tuple(d["resolution"]))


def camera_from_orbit(azimuth, elevation, radius, target=(0.0, 0.0, 0.0), focal=150.0, resolution=(128, 128)) -> Camera:
    return Camera(float(azimuth), float(elevation), float(radius), np.asarray(target, float), float(focal), tuple(resolution))


def project(cam: Camera, point):
    """Pinhole projection. Returns ``(u, v, depth, visible)``."""
    p = _as_vec3(point, "point")
    x, y, z = cam.world_to_camera(p)
    if z <= EPS_NEAR:
        return float("nan"), float("nan"), float(z), False
    u = cam.focal * x / z + 0.5 * cam.width
    v = cam.focal * y / z + 0.5 * cam.height
    return float(u), float(v), float(z), True


# -- mesh files -----------------------------------------------------------------

def load_obj(path) -> tuple[np.ndarray, np.ndarray]:
    """Read ``v`` and ``f`` lines of an OBJ file (1-based, ``v/vt/vn`` tokens allowed)."""
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) - 1 for tok in parts[1:]]
                if len(idx) != 3:
                    raise ValueError(f"{path}:{lineno}: only triangle faces are supported")
                faces.append(idx)
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def save_obj(path, vertices: np.ndarray, triangles: np.ndarray) -> None:
    with open(path, "w") as fh:
        for v in vertices:
            fh.write("v {!r} {!r} {!r}\n".format(*map(float, v)))
        for f in triangles:
            fh.write("f {} {} {}\n".format(*(int(i) + 1 for i in f)))


def load_blendshapes(path) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 3 or header[0] != "blendshapes":
            raise ValueError(f"{path}: expected header 'blendshapes K N'")
        k, n = int(header[1]), int(header[2])
        data = np.loadtxt(fh, dtype=np.float64, ndmin=2) if k * n else np.zeros((0, 3))
    if data.shape != (k * n, 3):
        raise ValueError(f"{path}: expected {k * n} rows of 3 values, got {data.shape}")
    return data.reshape(k, n, 3)


def save_blendshapes(path, blendshapes: np.ndarray) -> None:
    k, n, _ = blendshapes.shape
    with open(path, "w") as fh:
        fh.write(f"blendshapes {k} {n}\n")
        for row in blendshapes.reshape(-1, 3):
            fh.write("{!r} {!r} {!r}\n".format(*map(float, row)))


def load_mesh(obj_path, blendshape_path=None) -> ParametricMesh:
    verts, tris = load_obj(obj_path)
    shapes = load_blendshapes(blendshape_path) if blendshape_path else np.zeros((0, len(verts), 3))
    return ParametricMesh(verts, shapes, tris)


def save_mesh(mesh: ParametricMesh, obj_path, blendshape_path) -> None:
    save_obj(obj_path, mesh.base_vertices, mesh.triangles)
    save_blendshapes(blendshape_path, mesh.blendshapes)
