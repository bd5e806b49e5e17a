"""Numba compositing kernels.

Single-threaded and fastmath-free on purpose: the determinism contract wants
bit-identical output for identical inputs, and the tiled forward path must
agree with the brute-force reference within 1e-5, so culling uses an alpha
cutoff small enough (1e-20) to be lossless at fp64 rounding scale even through
the depth normalization (which divides by max(silhouette, 1e-8)).

Splat arrays arrive pre-sorted front-to-back (camera depth, index tie-break),
so iterating splats in storage order composites each pixel front-to-back.
"""

import math

import numpy as np
from numba import njit

ALPHA_CUTOFF = 1e-20
ALPHA_MAX = 0.999
SIL_FLOOR = 1e-8


@njit(cache=True)
def composite_forward(means, conics, opacities, colors, depths, boxes, h, w):
    """Tiled front-to-back compositing.

    means (M,2), conics (M,3)=(a,b,c) of the inverse 2d covariance,
    opacities (M,), colors (M,3), depths (M,), boxes (M,4)=(x0,x1,y0,y1)
    half-open pixel bounds.

    Returns rgb-sum (no background yet), raw depth sum, final transmittance,
    and the per-pixel sum of log1p(-alpha) used for robust backward
    reconstruction.
    """
    rgb = np.zeros((h, w, 3))
    draw = np.zeros((h, w))
    tfin = np.ones((h, w))
    logt = np.zeros((h, w))
    m = means.shape[0]
    for i in range(m):
        x0, x1, y0, y1 = boxes[i, 0], boxes[i, 1], boxes[i, 2], boxes[i, 3]
        ca, cb, cc = conics[i, 0], conics[i, 1], conics[i, 2]
        mx, my = means[i, 0], means[i, 1]
        op = opacities[i]
        col0, col1, col2 = colors[i, 0], colors[i, 1], colors[i, 2]
        z = depths[i]
        for py in range(y0, y1):
            dy = py - my
            for px in range(x0, x1):
                dx = px - mx
                power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
                if power > 0.0:
                    continue
                alpha = op * math.exp(power)
                if alpha < ALPHA_CUTOFF:
                    continue
                if alpha > ALPHA_MAX:
                    alpha = ALPHA_MAX
                t = tfin[py, px]
                wgt = alpha * t
                rgb[py, px, 0] += wgt * col0
                rgb[py, px, 1] += wgt * col1
                rgb[py, px, 2] += wgt * col2
                draw[py, px] += wgt * z
                tfin[py, px] = t * (1.0 - alpha)
                logt[py, px] += math.log1p(-alpha)
    return rgb, draw, tfin, logt


@njit(cache=True)
def composite_reference(means, conics, opacities, colors, depths, h, w):
    """Per-pixel brute force over every splat; no boxes, no alpha cutoff."""
    rgb = np.zeros((h, w, 3))
    draw = np.zeros((h, w))
    tfin = np.ones((h, w))
    m = means.shape[0]
    for py in range(h):
        for px in range(w):
            t = 1.0
            r0 = 0.0
            r1 = 0.0
            r2 = 0.0
            dacc = 0.0
            for i in range(m):
                dx = px - means[i, 0]
                dy = py - means[i, 1]
                power = (-0.5 * (conics[i, 0] * dx * dx + conics[i, 2] * dy * dy)
                         - conics[i, 1] * dx * dy)
                if power > 0.0:
                    continue
                alpha = opacities[i] * math.exp(power)
                if alpha > ALPHA_MAX:
                    alpha = ALPHA_MAX
                wgt = alpha * t
                r0 += wgt * colors[i, 0]
                r1 += wgt * colors[i, 1]
                r2 += wgt * colors[i, 2]
                dacc += wgt * depths[i]
                t *= (1.0 - alpha)
            rgb[py, px, 0] = r0
            rgb[py, px, 1] = r1
            rgb[py, px, 2] = r2
            draw[py, px] = dacc
            tfin[py, px] = t
    return rgb, draw, tfin


@njit(cache=True)
def composite_backward(means, conics, opacities, colors, depths, boxes, h, w,
                       logt_total, g_rgb, g_draw, b_map):
    """Reverse-order compositing backward.

    g_rgb (H,W,3) and g_draw (H,W) are adjoints of the rgb sum and the raw
    depth sum; b_map (H,W) is T_final * dL/dT_final. Transmittance in front of
    each splat is reconstructed in log space (logt_total from the forward
    pass), which stays correct even when the linear product underflows.

    Returns per-splat grads: color (M,3), mean (M,2), conic (M,3),
    opacity (M,), depth (M,).
    """
    m = means.shape[0]
    g_color = np.zeros((m, 3))
    g_mean = np.zeros((m, 2))
    g_conic = np.zeros((m, 3))
    g_op = np.zeros(m)
    g_z = np.zeros(m)
    suff = np.zeros((h, w))   # suffix sum of log1p(-alpha), back to front
    acc = np.zeros((h, w))    # suffix sum of w_k * g_w(k)
    for i in range(m - 1, -1, -1):
        x0, x1, y0, y1 = boxes[i, 0], boxes[i, 1], boxes[i, 2], boxes[i, 3]
        ca, cb, cc = conics[i, 0], conics[i, 1], conics[i, 2]
        mx, my = means[i, 0], means[i, 1]
        op = opacities[i]
        col0, col1, col2 = colors[i, 0], colors[i, 1], colors[i, 2]
        z = depths[i]
        for py in range(y0, y1):
            dy = py - my
            for px in range(x0, x1):
                dx = px - mx
                power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
                if power > 0.0:
                    continue
                alpha_raw = op * math.exp(power)
                if alpha_raw < ALPHA_CUTOFF:
                    continue
                clamped = alpha_raw > ALPHA_MAX
                alpha = ALPHA_MAX if clamped else alpha_raw
                s = suff[py, px] + math.log1p(-alpha)
                suff[py, px] = s
                ti = math.exp(logt_total[py, px] - s)
                wgt = alpha * ti
                gw = (g_rgb[py, px, 0] * col0 + g_rgb[py, px, 1] * col1
                      + g_rgb[py, px, 2] * col2 + g_draw[py, px] * z)
                d_alpha = ti * gw - (acc[py, px] + b_map[py, px]) / (1.0 - alpha)
                acc[py, px] += wgt * gw
                g_color[i, 0] += wgt * g_rgb[py, px, 0]
                g_color[i, 1] += wgt * g_rgb[py, px, 1]
                g_color[i, 2] += wgt * g_rgb[py, px, 2]
                g_z[i] += wgt * g_draw[py, px]
                if not clamped:
                    # alpha = op * exp(power)
                    g_op[i] += math.exp(power) * d_alpha
                    d_pow = alpha * d_alpha
                    ddx = d_pow * (-(ca * dx + cb * dy))
                    ddy = d_pow * (-(cc * dy + cb * dx))
                    g_mean[i, 0] -= ddx
                    g_mean[i, 1] -= ddy
                    g_conic[i, 0] += d_pow * (-0.5 * dx * dx)
                    g_conic[i, 1] += d_pow * (-dx * dy)
                    g_conic[i, 2] += d_pow * (-0.5 * dy * dy)
    return g_color, g_mean, g_conic, g_op, g_z
