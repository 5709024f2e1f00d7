"""Oracles and finite-difference utilities shared by the test modules."""
import numpy as np

from headsplat.splat import project_kernels

CUTOFF = 9.0


def quaternion_rotation(r):
    """Rotation matrix built from a unit quaternion; independent of Rodrigues' formula."""
    r = np.asarray(r, float)
    theta = np.linalg.norm(r)
    if theta == 0:
        return np.eye(3)
    axis = r / theta
    w = np.cos(theta / 2)
    x, y, z = np.sin(theta / 2) * axis
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def footprint_signature(world, cam):
    """Depth order plus the set of (kernel, pixel) pairs inside the 3 sigma cutoff."""
    proj = project_kernels(world, cam)
    parts = [proj.order.tobytes()]
    w = cam.width
    for k in proj.order:
        x0, x1, y0, y1 = proj.boxes[k]
        xs, ys = np.meshgrid(np.arange(x0, x1), np.arange(y0, y1))
        dx = xs - proj.means2d[k, 0]
        dy = ys - proj.means2d[k, 1]
        a, b, c = proj.conics[k]
        q = a * dx * dx + 2 * b * dx * dy + c * dy * dy
        parts.append((ys * w + xs)[q <= CUTOFF].tobytes())
    return b"|".join(parts)


def guarded_central_diff(loss, signature, x, h=1e-6, min_h=1e-9):
    """Central differences that shrink the step whenever +h and -h land on
    different sides of a footprint cutoff (the render is discontinuous there)."""
    out = np.zeros(x.shape)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        step = h
        while True:
            x[idx] = old + step
            sp, lp = signature(), loss()
            x[idx] = old - step
            sm, lm = signature(), loss()
            x[idx] = old
            if sp == sm or step <= min_h:
                break
            step /= 10
        out[idx] = (lp - lm) / (2 * step)
    return out


TINY_TOML = """\
seed = 3
rounds = 1

[cameras]
count = 6
real_resolution = [40, 40]
pseudo_resolution = [40, 40]
focal = 50.0

[fit]
steps = 12

[inversion]
steps_w = 6
steps_theta = 3

[synthesis]
count = 3

[alignment]
max_steps = 8
"""


def tiny_config(tmp_path, extra=""):
    """A scene config small enough for a full loop in a couple of seconds."""
    from headsplat.pipeline import load_config

    path = tmp_path / "tiny.toml"
    path.write_text(TINY_TOML + extra)
    return load_config(path)


# PASS/FAIL lines from the acceptance suite, printed in the terminal summary
ACCEPTANCE = []
