"""Numpy compositing kernels, used when the compiled extension is unavailable.

Kernels are splatted front to back one at a time, vectorised over the pixels of
each footprint. Contributions are recorded so the backward pass can replay them
back to front without dividing by ``1 - w``.
"""
import numpy as np

CUTOFF = 9.0  # squared Mahalanobis radius, i.e. a 3 sigma footprint


def _footprint(mean, conic, box, width):
    x0, x1, y0, y1 = box
    xs = np.arange(x0, x1, dtype=np.float64)
    ys = np.arange(y0, y1, dtype=np.float64)
    dx = np.broadcast_to(xs[None, :] - mean[0], (y1 - y0, x1 - x0)).ravel()
    dy = np.broadcast_to(ys[:, None] - mean[1], (y1 - y0, x1 - x0)).ravel()
    q = conic[0] * dx * dx + 2.0 * conic[1] * dx * dy + conic[2] * dy * dy
    keep = q <= CUTOFF
    pix = (np.arange(y0, y1)[:, None] * width + np.arange(x0, x1)[None, :]).ravel()
    return pix[keep], dx[keep], dy[keep], q[keep]


def forward(means2d, conics, opacities, colors, boxes, order, background, width, height, record=True, threads=1):
    npix = width * height
    rgb = np.zeros((npix, 3))
    alpha = np.zeros(npix)
    trans = np.ones(npix)
    entries = []
    for k in order:
        x0, x1, y0, y1 = boxes[k]
        if x1 <= x0 or y1 <= y0:
            continue
        pix, _, _, q = _footprint(means2d[k], conics[k], boxes[k], width)
        if pix.size == 0:
            continue
        w = opacities[k] * np.exp(-0.5 * q)
        t = trans[pix]
        contrib = w * t
        rgb[pix] += colors[k][None, :] * contrib[:, None]
        alpha[pix] += contrib
        trans[pix] = t * (1.0 - w)
        if record:
            entries.append((k, pix, w, t))
    rgb += trans[:, None] * np.asarray(background, dtype=np.float64)[None, :]
    return rgb.reshape(height, width, 3), alpha.reshape(height, width), entries


def backward(entries, means2d, conics, opacities, colors, background, g_rgb, g_alpha, width, height, threads=1):
    n = len(opacities)
    g_means = np.zeros((n, 2))
    g_conics = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_colors = np.zeros((n, 3))
    npix = width * height
    g_rgb = np.asarray(g_rgb, dtype=np.float64).reshape(npix, 3)
    g_alpha = np.asarray(g_alpha, dtype=np.float64).reshape(npix)
    # colour and coverage composited behind the current kernel
    after = np.broadcast_to(np.asarray(background, dtype=np.float64), (npix, 3)).copy()
    after_a = np.zeros(npix)
    for k, pix, w, t in reversed(entries):
        c = colors[k]
        gc = g_rgb[pix]
        ga = g_alpha[pix]
        g_w = t * (np.sum(gc * (c[None, :] - after[pix]), axis=1) + ga * (1.0 - after_a[pix]))
        g_colors[k] += gc.T @ (w * t)
        one_minus = 1.0 - w
        after[pix] = c[None, :] * w[:, None] + one_minus[:, None] * after[pix]
        after_a[pix] = w + one_minus * after_a[pix]

        xs = (pix % width).astype(np.float64)
        ys = (pix // width).astype(np.float64)
        dx = xs - means2d[k, 0]
        dy = ys - means2d[k, 1]
        a, b, cc = conics[k]
        q = a * dx * dx + 2.0 * b * dx * dy + cc * dy * dy
        gauss = np.exp(-0.5 * q)
        g_opac[k] += np.sum(g_w * gauss)
        g_q = -0.5 * g_w * opacities[k] * gauss
        g_means[k, 0] += np.sum(-2.0 * g_q * (a * dx + b * dy))
        g_means[k, 1] += np.sum(-2.0 * g_q * (b * dx + cc * dy))
        g_conics[k, 0] += np.sum(g_q * dx * dx)
        g_conics[k, 1] += np.sum(g_q * 2.0 * dx * dy)
        g_conics[k, 2] += np.sum(g_q * dy * dy)
    return g_means, g_conics, g_opac, g_colors
