"""Low-level image filtering shared by the loss terms and metrics.

Plain numpy throughout.  Every nonlinear map here ships its own backward
pass, and every linear filter its exact adjoint, so that loss gradients
composed from these pieces survive finite-difference scrutiny.
"""

from __future__ import annotations

import numpy as np

from .errors import EmptyMask, ShapeMismatch

BINOMIAL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0

COLOR_BINS = 8
ORIENT_BINS = 8

# Keeps sqrt/atan2 differentiable on flat image patches.
GRAD_EPS = 1e-12


# --------------------------------------------------------------- 1-d filters

def _filter1d(x: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    """Correlate along one axis with reflect padding ('same' output)."""
    r = len(kernel) // 2
    xm = np.moveaxis(x, axis, 0)
    n = xm.shape[0]
    if n <= r:
        raise ShapeMismatch(f"axis {axis} too short for kernel: {n} <= {r}")
    pad = [(r, r)] + [(0, 0)] * (xm.ndim - 1)
    xp = np.pad(xm, pad, mode="reflect")
    out = np.zeros_like(xm)
    for k, w in enumerate(kernel):
        out += w * xp[k:k + n]
    return np.moveaxis(out, 0, axis)


def _filter1d_adjoint(g: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    """Exact adjoint of _filter1d, reflect-padding fold included."""
    r = len(kernel) // 2
    gm = np.moveaxis(g, axis, 0)
    n = gm.shape[0]
    if n <= r:
        raise ShapeMismatch(f"axis {axis} too short for kernel: {n} <= {r}")
    gp = np.zeros((n + 2 * r,) + gm.shape[1:], dtype=g.dtype)
    for k, w in enumerate(kernel):
        gp[k:k + n] += w * gm
    gx = gp[r:r + n].copy()
    for j in range(r):
        gx[r - j] += gp[j]
        gx[n - 2 - j] += gp[r + n + j]
    return np.moveaxis(gx, 0, axis)


def filter2d(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable 2-d filtering over the leading two axes."""
    return _filter1d(_filter1d(img, kernel, 0), kernel, 1)


def filter2d_adjoint(g: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return _filter1d_adjoint(_filter1d_adjoint(g, kernel, 1), kernel, 0)


def blur(img: np.ndarray) -> np.ndarray:
    return filter2d(img, BINOMIAL)


def blur_adjoint(g: np.ndarray) -> np.ndarray:
    return filter2d_adjoint(g, BINOMIAL)


# ------------------------------------------------------------------ pyramids

def downsample2(img: np.ndarray) -> np.ndarray:
    return blur(img)[::2, ::2]


def downsample2_adjoint(g: np.ndarray, shape: tuple) -> np.ndarray:
    full = np.zeros(shape, dtype=g.dtype)
    full[::2, ::2] = g
    return blur_adjoint(full)


def pyramid(img: np.ndarray, levels: int = 3) -> list[np.ndarray]:
    out = [img]
    for _ in range(levels - 1):
        out.append(downsample2(out[-1]))
    return out


def pyramid_adjoint(level_grads: list[np.ndarray],
                    level_shapes: list[tuple]) -> np.ndarray:
    """Pull per-level gradients back to the base image."""
    acc = level_grads[-1]
    for lvl in range(len(level_grads) - 2, -1, -1):
        acc = level_grads[lvl] + downsample2_adjoint(acc, level_shapes[lvl])
    return acc


def mask_downsample(mask: np.ndarray) -> np.ndarray:
    """Majority vote over the blur footprint, matching downsample2 geometry."""
    frac = downsample2(mask.astype(np.float64))
    return frac > 0.5


# ----------------------------------------------------------- image gradients

def luminance(img: np.ndarray) -> np.ndarray:
    if img.ndim == 3:
        return img.mean(axis=2)
    return img


def luminance_adjoint(g: np.ndarray, img_ndim: int, channels: int = 3) -> np.ndarray:
    if img_ndim == 3:
        return np.repeat(g[:, :, None], channels, axis=2) / channels
    return g


def _central_diff(x: np.ndarray, axis: int) -> np.ndarray:
    return np.gradient(x, axis=axis)


def _central_diff_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    gm = np.moveaxis(g, axis, 0)
    out = np.zeros_like(gm)
    n = gm.shape[0]
    if n < 2:
        raise ShapeMismatch("need at least 2 samples for a finite difference")
    # interior: y[i] = (x[i+1] - x[i-1]) / 2
    out[2:] += gm[1:-1] / 2.0
    out[:-2] -= gm[1:-1] / 2.0
    # one-sided ends: y[0] = x[1] - x[0]; y[-1] = x[-1] - x[-2]
    out[1] += gm[0]
    out[0] -= gm[0]
    out[-1] += gm[-1]
    out[-2] -= gm[-1]
    return np.moveaxis(out, 0, axis)


def gradient_magnitude(img: np.ndarray) -> tuple[np.ndarray, dict]:
    """Central-difference gradient magnitude of the luminance image."""
    lum = luminance(img)
    gy = _central_diff(lum, 0)
    gx = _central_diff(lum, 1)
    gm = np.sqrt(gx * gx + gy * gy + GRAD_EPS)
    cache = {"gx": gx, "gy": gy, "gm": gm, "ndim": img.ndim,
             "channels": img.shape[2] if img.ndim == 3 else 1}
    return gm, cache


def gradient_magnitude_backward(cache: dict, g_gm: np.ndarray) -> np.ndarray:
    gx, gy, gm = cache["gx"], cache["gy"], cache["gm"]
    d_gx = g_gm * gx / gm
    d_gy = g_gm * gy / gm
    d_lum = _central_diff_adjoint(d_gy, 0) + _central_diff_adjoint(d_gx, 1)
    return luminance_adjoint(d_lum, cache["ndim"], cache["channels"])


# ---------------------------------------------------------------------- SSIM

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


_SSIM_KERNEL = gaussian_kernel()


def _ssim_terms(a: np.ndarray, b: np.ndarray) -> dict:
    k = _SSIM_KERNEL
    mu_a = filter2d(a, k)
    mu_b = filter2d(b, k)
    var_a = filter2d(a * a, k) - mu_a * mu_a
    var_b = filter2d(b * b, k) - mu_b * mu_b
    cov = filter2d(a * b, k) - mu_a * mu_b
    n1 = 2.0 * mu_a * mu_b + SSIM_C1
    n2 = 2.0 * cov + SSIM_C2
    d1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1
    d2 = var_a + var_b + SSIM_C2
    return {"mu_a": mu_a, "mu_b": mu_b, "n1": n1, "n2": n2, "d1": d1,
            "d2": d2, "map": (n1 * n2) / (d1 * d2)}


def ssim(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    if a.shape != b.shape:
        raise ShapeMismatch(f"ssim shapes differ: {a.shape} vs {b.shape}")
    s = _ssim_terms(np.asarray(a, dtype=np.float64),
                    np.asarray(b, dtype=np.float64))["map"]
    if mask is None:
        return float(s.mean())
    if not mask.any():
        raise EmptyMask("ssim over an empty mask")
    return float(s[mask].mean())


def ssim_with_grad(a: np.ndarray, b: np.ndarray,
                   mask: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """Mean SSIM and its gradient with respect to the first image."""
    if a.shape != b.shape:
        raise ShapeMismatch(f"ssim shapes differ: {a.shape} vs {b.shape}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    t = _ssim_terms(a, b)
    s_map = t["map"]
    if mask is None:
        g_map = np.full(s_map.shape, 1.0 / s_map.size)
        value = float(s_map.mean())
    else:
        if not mask.any():
            raise EmptyMask("ssim over an empty mask")
        g_map = np.zeros(s_map.shape)
        if s_map.ndim == 3 and mask.ndim == 2:
            count = mask.sum() * s_map.shape[2]
            g_map[mask] = 1.0 / count
            value = float(s_map[mask].mean())
        else:
            g_map[mask] = 1.0 / mask.sum()
            value = float(s_map[mask].mean())

    n1, n2, d1, d2 = t["n1"], t["n2"], t["d1"], t["d2"]
    mu_a, mu_b = t["mu_a"], t["mu_b"]
    g_n1 = g_map * n2 / (d1 * d2)
    g_n2 = g_map * n1 / (d1 * d2)
    g_d1 = -g_map * s_map / d1
    g_d2 = -g_map * s_map / d2
    # var_a enters d2 directly; cov enters n2; mu_a enters n1, d1 and the
    # subtraction inside both var_a and cov.
    g_var_a = g_d2
    g_cov = 2.0 * g_n2
    g_mu_a = (2.0 * mu_b * g_n1 + 2.0 * mu_a * g_d1
              - 2.0 * mu_a * g_var_a - mu_b * g_cov)
    k = _SSIM_KERNEL
    grad = (filter2d_adjoint(g_mu_a, k)
            + 2.0 * a * filter2d_adjoint(g_var_a, k)
            + b * filter2d_adjoint(g_cov, k))
    return value, grad


# ---------------------------------------------------------------- resampling

def bilinear_sample(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample img at float pixel coords (u along width, v along height).

    Coordinates are clamped to the image border.
    """
    h, w = img.shape[:2]
    u = np.clip(u, 0.0, w - 1.0)
    v = np.clip(v, 0.0, h - 1.0)
    u0 = np.clip(np.floor(u).astype(np.int64), 0, w - 2) if w > 1 else np.zeros_like(u, np.int64)
    v0 = np.clip(np.floor(v).astype(np.int64), 0, h - 2) if h > 1 else np.zeros_like(v, np.int64)
    fu = u - u0
    fv = v - v0
    if img.ndim == 3:
        fu = fu[..., None]
        fv = fv[..., None]
    top = img[v0, u0] * (1 - fu) + img[v0, np.minimum(u0 + 1, w - 1)] * fu
    bot = (img[np.minimum(v0 + 1, h - 1), u0] * (1 - fu)
           + img[np.minimum(v0 + 1, h - 1), np.minimum(u0 + 1, w - 1)] * fu)
    return top * (1 - fv) + bot * fv


# ------------------------------------------------------------ soft histograms

def _linear_bin(coord: np.ndarray, bins: int) -> tuple:
    """Two-bin soft assignment with clamped ends.

    Returns (left index, right index, right weight, interior flag); the
    interior flag zeroes the derivative where clamping froze the weights.
    """
    i0 = np.floor(coord).astype(np.int64)
    f = coord - i0
    left = np.clip(i0, 0, bins - 1)
    right = np.clip(i0 + 1, 0, bins - 1)
    interior = (left != right).astype(np.float64)
    return left, right, f, interior


def soft_color_histogram(img: np.ndarray, mask: np.ndarray,
                         bins: int = COLOR_BINS) -> tuple[np.ndarray, dict]:
    """Joint RGB histogram with trilinear soft binning; masked pixels only."""
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeMismatch("color histogram needs an H x W x 3 image")
    sel = img[mask]
    coord = sel * bins - 0.5
    parts = [_linear_bin(coord[:, c], bins) for c in range(3)]
    hist = np.zeros(bins ** 3)
    combos = []
    for bits in range(8):
        idx = np.zeros(sel.shape[0], dtype=np.int64)
        w = np.ones(sel.shape[0])
        dw = [None, None, None]
        for c in range(3):
            left, right, f, interior = parts[c]
            take_right = (bits >> c) & 1
            idx = idx * bins + (right if take_right else left)
            wc = f if take_right else (1.0 - f)
            dwc = interior * bins * (1.0 if take_right else -1.0)
            dw[c] = (wc, dwc)
            w = w * wc
        np.add.at(hist, idx, w)
        combos.append((idx, dw))
    cache = {"mask": mask, "bins": bins, "combos": combos,
             "count": sel.shape[0], "shape": img.shape}
    return hist, cache


def soft_color_histogram_backward(cache: dict, g_hist: np.ndarray) -> np.ndarray:
    g_sel = np.zeros((cache["count"], 3))
    for idx, dw in cache["combos"]:
        g_at = g_hist[idx]
        w0, d0 = dw[0]
        w1, d1 = dw[1]
        w2, d2 = dw[2]
        g_sel[:, 0] += g_at * d0 * w1 * w2
        g_sel[:, 1] += g_at * w0 * d1 * w2
        g_sel[:, 2] += g_at * w0 * w1 * d2
    g_img = np.zeros(cache["shape"])
    g_img[cache["mask"]] = g_sel
    return g_img


def soft_orientation_histogram(img: np.ndarray, mask: np.ndarray,
                               bins: int = ORIENT_BINS) -> tuple[np.ndarray, dict]:
    """Gradient-orientation histogram, magnitude-weighted, circular bins."""
    gm, gm_cache = gradient_magnitude(img)
    gx, gy = gm_cache["gx"], gm_cache["gy"]
    theta = np.arctan2(gy, gx)
    coord = (theta + np.pi) / (2.0 * np.pi) * bins - 0.5
    i0 = np.floor(coord).astype(np.int64)
    f = coord - i0
    left = np.mod(i0, bins)
    right = np.mod(i0 + 1, bins)
    hist = np.zeros(bins)
    np.add.at(hist, left[mask], (gm * (1.0 - f))[mask])
    np.add.at(hist, right[mask], (gm * f)[mask])
    cache = {"mask": mask, "bins": bins, "left": left, "right": right,
             "f": f, "gm": gm, "gx": gx, "gy": gy, "gm_cache": gm_cache}
    return hist, cache


def soft_orientation_histogram_backward(cache: dict,
                                        g_hist: np.ndarray) -> np.ndarray:
    mask = cache["mask"]
    f, gm = cache["f"], cache["gm"]
    gx, gy = cache["gx"], cache["gy"]
    g_left = g_hist[cache["left"]]
    g_right = g_hist[cache["right"]]
    d_gm = np.where(mask, g_left * (1.0 - f) + g_right * f, 0.0)
    d_f = np.where(mask, gm * (g_right - g_left), 0.0)
    d_theta = d_f * cache["bins"] / (2.0 * np.pi)
    r2 = gx * gx + gy * gy + GRAD_EPS
    d_gx = d_theta * (-gy / r2) + d_gm * gx / gm
    d_gy = d_theta * (gx / r2) + d_gm * gy / gm
    d_lum = _central_diff_adjoint(d_gy, 0) + _central_diff_adjoint(d_gx, 1)
    gmc = cache["gm_cache"]
    return luminance_adjoint(d_lum, gmc["ndim"], gmc["channels"])
