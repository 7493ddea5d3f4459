# Front-to-back alpha compositing kernels (numba).
#
# Inputs are per-Gaussian arrays already sorted by depth. Pixel (px, py) sits at
# integer coordinates; offsets from the projected centre are taken as
# (px - cx) - u so that integer principal-point shifts translate the image
# exactly. Each Gaussian touches the pixels of its square box of half-width r.

import numpy as np
from numba import njit

T_MIN = 1e-4


@njit(cache=True)
def _box(u, v, r, cx, cy, W, H):
    x0 = max(0, int(np.floor(cx + u - r)) - 1)
    x1 = min(W - 1, int(np.ceil(cx + u + r)) + 1)
    y0 = max(0, int(np.floor(cy + v - r)) - 1)
    y1 = min(H - 1, int(np.ceil(cy + v + r)) + 1)
    return x0, x1, y0, y1


@njit(cache=True)
def box_offsets(uv, radius, cx, cy, W, H):
    G = uv.shape[0]
    off = np.zeros(G + 1, dtype=np.int64)
    for g in range(G):
        x0, x1, y0, y1 = _box(uv[g, 0], uv[g, 1], radius[g], cx, cy, W, H)
        n = 0
        if x1 >= x0 and y1 >= y0:
            n = (x1 - x0 + 1) * (y1 - y0 + 1)
        off[g + 1] = off[g] + n
    return off


@njit(cache=True)
def forward(uv, conic, opacity, color, radius, cx, cy, W, H, off):
    """Returns image (H, W, 3), final transmittance (H, W) and, for every
    box pixel, the transmittance in front of the Gaussian (-1 if skipped)."""
    G = uv.shape[0]
    img = np.zeros((H, W, 3))
    T = np.ones((H, W))
    t_before = np.full(off[G], -1.0)
    for g in range(G):
        u = uv[g, 0]
        v = uv[g, 1]
        r = radius[g]
        A = conic[g, 0]
        B = conic[g, 1]
        C = conic[g, 2]
        x0, x1, y0, y1 = _box(u, v, r, cx, cy, W, H)
        k = off[g]
        for py in range(y0, y1 + 1):
            dy = (py - cy) - v
            for px in range(x0, x1 + 1):
                dx = (px - cx) - u
                Tp = T[py, px]
                if abs(dx) <= r and abs(dy) <= r and Tp >= T_MIN:
                    power = -0.5 * (A * dx * dx + C * dy * dy) - B * dx * dy
                    a = opacity[g] * np.exp(power)
                    w = a * Tp
                    img[py, px, 0] += w * color[g, 0]
                    img[py, px, 1] += w * color[g, 1]
                    img[py, px, 2] += w * color[g, 2]
                    T[py, px] = Tp * (1.0 - a)
                    t_before[k] = Tp
                k += 1
    return img, T, t_before


@njit(cache=True)
def backward(uv, conic, opacity, color, radius, cx, cy, W, H, off, t_before, gimg):
    G = uv.shape[0]
    g_uv = np.zeros((G, 2))
    g_conic = np.zeros((G, 3))
    g_op = np.zeros(G)
    g_col = np.zeros((G, 3))
    # composite colour of everything behind the current Gaussian, per pixel
    S = np.zeros((H, W, 3))
    for g in range(G - 1, -1, -1):
        u = uv[g, 0]
        v = uv[g, 1]
        r = radius[g]
        A = conic[g, 0]
        B = conic[g, 1]
        C = conic[g, 2]
        x0, x1, y0, y1 = _box(u, v, r, cx, cy, W, H)
        k = off[g]
        for py in range(y0, y1 + 1):
            dy = (py - cy) - v
            for px in range(x0, x1 + 1):
                Tp = t_before[k]
                k += 1
                if Tp < 0.0:
                    continue
                dx = (px - cx) - u
                e = np.exp(-0.5 * (A * dx * dx + C * dy * dy) - B * dx * dy)
                a = opacity[g] * e
                ga = 0.0
                for c in range(3):
                    go = gimg[py, px, c]
                    g_col[g, c] += go * a * Tp
                    ga += go * Tp * (color[g, c] - S[py, px, c])
                    S[py, px, c] = a * color[g, c] + (1.0 - a) * S[py, px, c]
                g_op[g] += ga * e
                gp = ga * a
                g_conic[g, 0] += -0.5 * dx * dx * gp
                g_conic[g, 1] += -dx * dy * gp
                g_conic[g, 2] += -0.5 * dy * dy * gp
                g_uv[g, 0] += (A * dx + B * dy) * gp
                g_uv[g, 1] += (C * dy + B * dx) * gp
    return g_uv, g_conic, g_op, g_col
