# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled compositing kernels.

Same contract as :mod:`headsplat._raster_py`. The image is split into horizontal
bands, one per thread; each band walks the depth-sorted kernels independently so
per-pixel results do not depend on the thread count.
"""
import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport exp

cnp.import_array()

cdef double CUTOFF = 9.0


cdef inline Py_ssize_t _imax(Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    return a if a > b else b


cdef inline Py_ssize_t _imin(Py_ssize_t a, Py_ssize_t b) noexcept nogil:
    return a if a < b else b


cdef class Context:
    cdef public object ek, ep, ew, et, start, count
    cdef public int bands, width, height


def _band_rows(int height, int bands):
    edges = [(height * b) // bands for b in range(bands + 1)]
    return np.asarray(edges, dtype=np.intp)


cdef void _forward_band(
    Py_ssize_t row0, Py_ssize_t row1, int width,
    const double[:, ::1] means, const double[:, ::1] conics, const double[::1] opac,
    const double[:, ::1] colors, const int[:, ::1] boxes, const int[::1] order,
    double[:, ::1] rgb, double[::1] alpha, double[::1] trans,
    bint record, Py_ssize_t start, int[::1] ek, int[::1] ep, double[::1] ew, double[::1] et,
    Py_ssize_t[::1] count, Py_ssize_t band,
) noexcept nogil:
    cdef Py_ssize_t oi, k, x, y, x0, x1, ya, yb, p
    cdef Py_ssize_t e = start
    cdef double mx, my, a, b, c, op, dx, dy, q, w, t, contrib
    for oi in range(order.shape[0]):
        k = order[oi]
        x0 = boxes[k, 0]
        x1 = boxes[k, 1]
        ya = _imax(boxes[k, 2], row0)
        yb = _imin(boxes[k, 3], row1)
        if x1 <= x0 or yb <= ya:
            continue
        mx = means[k, 0]
        my = means[k, 1]
        a = conics[k, 0]
        b = conics[k, 1]
        c = conics[k, 2]
        op = opac[k]
        for y in range(ya, yb):
            dy = y - my
            for x in range(x0, x1):
                dx = x - mx
                q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                if q > CUTOFF:
                    continue
                w = op * exp(-0.5 * q)
                p = y * width + x
                t = trans[p]
                contrib = w * t
                rgb[p, 0] += colors[k, 0] * contrib
                rgb[p, 1] += colors[k, 1] * contrib
                rgb[p, 2] += colors[k, 2] * contrib
                alpha[p] += contrib
                trans[p] = t * (1.0 - w)
                if record:
                    ek[e] = <int>k
                    ep[e] = <int>p
                    ew[e] = w
                    et[e] = t
                    e += 1
    count[band] = e - start


def forward(means2d, conics, opacities, colors, boxes, order, background, int width, int height,
            bint record=True, int threads=1):
    cdef int bands = max(1, min(threads, height))
    cdef Py_ssize_t npix = width * height
    cdef double[:, ::1] m = np.ascontiguousarray(means2d, dtype=np.float64)
    cdef double[:, ::1] con = np.ascontiguousarray(conics, dtype=np.float64)
    cdef double[::1] op = np.ascontiguousarray(opacities, dtype=np.float64)
    cdef double[:, ::1] col = np.ascontiguousarray(colors, dtype=np.float64)
    box_arr = np.ascontiguousarray(boxes, dtype=np.int32).reshape(-1, 4)
    cdef int[:, ::1] bx = box_arr
    cdef int[::1] od = np.ascontiguousarray(order, dtype=np.int32)
    rgb_arr = np.zeros((npix, 3))
    alpha_arr = np.zeros(npix)
    trans_arr = np.ones(npix)
    cdef double[:, ::1] rgb = rgb_arr
    cdef double[::1] alpha = alpha_arr
    cdef double[::1] trans = trans_arr
    edges = _band_rows(height, bands)
    cdef Py_ssize_t[::1] ed = edges

    # capacity of each band: footprint boxes clipped to the band rows
    starts = np.zeros(bands + 1, dtype=np.intp)
    if record and len(od):
        sel = box_arr[np.asarray(od)]
        widths = np.clip(sel[:, 1] - sel[:, 0], 0, None).astype(np.intp)
        for bi in range(bands):
            rows = np.clip(np.minimum(sel[:, 3], edges[bi + 1]) - np.maximum(sel[:, 2], edges[bi]), 0, None)
            starts[bi + 1] = starts[bi] + int(np.sum(rows * widths))
    total = int(starts[bands])
    ek_arr = np.empty(total, dtype=np.int32)
    ep_arr = np.empty(total, dtype=np.int32)
    ew_arr = np.empty(total)
    et_arr = np.empty(total)
    count_arr = np.zeros(bands, dtype=np.intp)
    cdef int[::1] ek = ek_arr
    cdef int[::1] ep = ep_arr
    cdef double[::1] ew = ew_arr
    cdef double[::1] et = et_arr
    cdef Py_ssize_t[::1] st = starts
    cdef Py_ssize_t[::1] cnt = count_arr
    cdef Py_ssize_t bi_
    if bands == 1:
        _forward_band(0, height, width, m, con, op, col, bx, od, rgb, alpha, trans,
                      record, 0, ek, ep, ew, et, cnt, 0)
    else:
        for bi_ in prange(bands, nogil=True, num_threads=bands, schedule="static"):
            _forward_band(ed[bi_], ed[bi_ + 1], width, m, con, op, col, bx, od, rgb, alpha, trans,
                          record, st[bi_], ek, ep, ew, et, cnt, bi_)
    bg = np.asarray(background, dtype=np.float64)
    rgb_arr += trans_arr[:, None] * bg[None, :]
    ctx = None
    if record:
        ctx = Context()
        ctx.ek, ctx.ep, ctx.ew, ctx.et = ek_arr, ep_arr, ew_arr, et_arr
        ctx.start, ctx.count = starts, count_arr
        ctx.bands, ctx.width, ctx.height = bands, width, height
    return rgb_arr.reshape(height, width, 3), alpha_arr.reshape(height, width), ctx


cdef void _backward_band(
    Py_ssize_t start, Py_ssize_t count, int width,
    const double[:, ::1] means, const double[:, ::1] conics, const double[::1] opac,
    const double[:, ::1] colors, const double[:, ::1] g_rgb, const double[::1] g_alpha,
    const int[::1] ek, const int[::1] ep, const double[::1] ew, const double[::1] et,
    double[:, ::1] after, double[::1] after_a,
    double[:, :, ::1] g_means, double[:, :, ::1] g_conics, double[:, ::1] g_opac,
    double[:, :, ::1] g_colors, Py_ssize_t band,
) noexcept nogil:
    cdef Py_ssize_t e, k, p
    cdef double w, t, gw, wt, om, dx, dy, a, b, c, q, gauss, gq, cr, cg, cb
    for e in range(start + count - 1, start - 1, -1):
        k = ek[e]
        p = ep[e]
        w = ew[e]
        t = et[e]
        cr = colors[k, 0]
        cg = colors[k, 1]
        cb = colors[k, 2]
        gw = t * (g_rgb[p, 0] * (cr - after[p, 0]) + g_rgb[p, 1] * (cg - after[p, 1])
                  + g_rgb[p, 2] * (cb - after[p, 2]) + g_alpha[p] * (1.0 - after_a[p]))
        wt = w * t
        g_colors[band, k, 0] += g_rgb[p, 0] * wt
        g_colors[band, k, 1] += g_rgb[p, 1] * wt
        g_colors[band, k, 2] += g_rgb[p, 2] * wt
        om = 1.0 - w
        after[p, 0] = cr * w + om * after[p, 0]
        after[p, 1] = cg * w + om * after[p, 1]
        after[p, 2] = cb * w + om * after[p, 2]
        after_a[p] = w + om * after_a[p]

        dx = (p % width) - means[k, 0]
        dy = (p // width) - means[k, 1]
        a = conics[k, 0]
        b = conics[k, 1]
        c = conics[k, 2]
        q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
        gauss = exp(-0.5 * q)
        g_opac[band, k] += gw * gauss
        gq = -0.5 * gw * opac[k] * gauss
        g_means[band, k, 0] += -2.0 * gq * (a * dx + b * dy)
        g_means[band, k, 1] += -2.0 * gq * (b * dx + c * dy)
        g_conics[band, k, 0] += gq * dx * dx
        g_conics[band, k, 1] += gq * 2.0 * dx * dy
        g_conics[band, k, 2] += gq * dy * dy


def backward(Context ctx, means2d, conics, opacities, colors, background, g_rgb, g_alpha,
             int width, int height, int threads=1):
    cdef Py_ssize_t n = len(opacities)
    cdef int bands = ctx.bands
    cdef Py_ssize_t npix = width * height
    cdef double[:, ::1] m = np.ascontiguousarray(means2d, dtype=np.float64)
    cdef double[:, ::1] con = np.ascontiguousarray(conics, dtype=np.float64)
    cdef double[::1] op = np.ascontiguousarray(opacities, dtype=np.float64)
    cdef double[:, ::1] col = np.ascontiguousarray(colors, dtype=np.float64)
    cdef double[:, ::1] grgb = np.ascontiguousarray(g_rgb, dtype=np.float64).reshape(npix, 3)
    cdef double[::1] galpha = np.ascontiguousarray(g_alpha, dtype=np.float64).reshape(npix)
    after_arr = np.empty((npix, 3))
    after_arr[:] = np.asarray(background, dtype=np.float64)[None, :]
    after_a_arr = np.zeros(npix)
    cdef double[:, ::1] after = after_arr
    cdef double[::1] after_a = after_a_arr
    gm_arr = np.zeros((bands, n, 2))
    gc_arr = np.zeros((bands, n, 3))
    go_arr = np.zeros((bands, n))
    gcol_arr = np.zeros((bands, n, 3))
    cdef double[:, :, ::1] gm = gm_arr
    cdef double[:, :, ::1] gcon = gc_arr
    cdef double[:, ::1] gop = go_arr
    cdef double[:, :, ::1] gcol = gcol_arr
    cdef int[::1] ek = ctx.ek
    cdef int[::1] ep = ctx.ep
    cdef double[::1] ew = ctx.ew
    cdef double[::1] et = ctx.et
    cdef Py_ssize_t[::1] st = ctx.start
    cdef Py_ssize_t[::1] cnt = ctx.count
    cdef Py_ssize_t bi
    if bands == 1:
        _backward_band(st[0], cnt[0], width, m, con, op, col, grgb, galpha, ek, ep, ew, et,
                       after, after_a, gm, gcon, gop, gcol, 0)
    else:
        for bi in prange(bands, nogil=True, num_threads=bands, schedule="static"):
            _backward_band(st[bi], cnt[bi], width, m, con, op, col, grgb, galpha, ek, ep, ew, et,
                           after, after_a, gm, gcon, gop, gcol, bi)
    # fixed band order keeps the reduction deterministic for a given thread count
    g_means, g_conics, g_opac, g_colors = gm_arr[0].copy(), gc_arr[0].copy(), go_arr[0].copy(), gcol_arr[0].copy()
    for b in range(1, bands):
        g_means += gm_arr[b]
        g_conics += gc_arr[b]
        g_opac += go_arr[b]
        g_colors += gcol_arr[b]
    return g_means, g_conics, g_opac, g_colors
