"""Loss terms for view tracking and base reconstruction.

The tracking loss is a weighted sum of photometric, perceptual, semantic,
and depth terms, each optionally restricted to the visibility mask.  The
perceptual and semantic terms go through a pluggable feature provider; the
built-in provider is a deterministic proxy (gradient-pyramid distance and
histogram-embedding cosine) so the whole engine runs without any neural
network in the loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _imageops as iops
from .errors import EmptyMask, MissingPrior, ShapeMismatch


@dataclass
class LossWeights:
    photometric: float = 0.02
    perceptual: float = 0.1
    semantic: float = 0.1
    depth: float = 0.5


@dataclass
class BaseLossWeights:
    photometric: float = 0.8
    ssim: float = 0.2
    depth: float = 0.5
    track: float = 2.0


# ------------------------------------------------------------- simple terms

def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")


def photometric_l1(a: np.ndarray, b: np.ndarray,
                   mask: np.ndarray | None = None) -> float:
    _check_same_shape(a, b)
    diff = np.abs(a - b)
    if mask is None:
        return float(diff.mean())
    if not mask.any():
        return 0.0
    return float(diff[mask].mean())


def photometric_l1_with_grad(a: np.ndarray, b: np.ndarray,
                             mask: np.ndarray | None = None):
    """L1 value and gradient with respect to the first image."""
    _check_same_shape(a, b)
    diff = a - b
    grad = np.zeros_like(a)
    if mask is None:
        val = float(np.abs(diff).mean())
        grad = np.sign(diff) / diff.size
        return val, grad
    if not mask.any():
        return 0.0, grad
    count = mask.sum() * (a.shape[2] if a.ndim == 3 else 1)
    val = float(np.abs(diff)[mask].mean())
    grad[mask] = np.sign(diff[mask]) / count
    return val, grad


def _valid_depth(reference: np.ndarray) -> np.ndarray:
    return np.isfinite(reference) & (reference > 0)


def depth_l1(d: np.ndarray, r: np.ndarray,
             mask: np.ndarray | None = None) -> float:
    _check_same_shape(d, r)
    valid = _valid_depth(r)
    if mask is not None:
        valid &= mask
    if not valid.any():
        return 0.0
    return float(np.abs(d - r)[valid].mean())


def depth_l1_with_grad(d: np.ndarray, r: np.ndarray,
                       mask: np.ndarray | None = None):
    _check_same_shape(d, r)
    valid = _valid_depth(r)
    if mask is not None:
        valid &= mask
    grad = np.zeros_like(d)
    if not valid.any():
        return 0.0, grad
    diff = d - r
    val = float(np.abs(diff)[valid].mean())
    grad[valid] = np.sign(diff[valid]) / valid.sum()
    return val, grad


# -------------------------------------------------------- feature providers

class FeatureProvider:
    """Perceptual distance and global embedding, both deterministic.

    perceptual(x, x, mask) must be 0 and embed must return a unit vector.
    Providers that can also differentiate expose perceptual_with_grad /
    semantic_with_grad; the engine falls back to value-only (zero gradient
    contribution) when those hooks are absent.
    """

    def perceptual(self, a: np.ndarray, b: np.ndarray,
                   mask: np.ndarray | None) -> float:
        raise NotImplementedError

    def embed(self, image: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
        raise NotImplementedError

    def semantic(self, a: np.ndarray, b: np.ndarray,
                 mask: np.ndarray | None) -> float:
        try:
            ea = self.embed(a, mask)
            eb = self.embed(b, mask)
        except EmptyMask:
            return 0.0
        return float(1.0 - np.dot(ea, eb))


def _full_mask(image: np.ndarray) -> np.ndarray:
    return np.ones(image.shape[:2], dtype=bool)


def _normalize(v: np.ndarray):
    n = max(float(np.linalg.norm(v)), 1e-30)
    return v / n, n


def _normalize_backward(unit: np.ndarray, norm: float,
                        g_unit: np.ndarray) -> np.ndarray:
    return (g_unit - unit * np.dot(unit, g_unit)) / norm


class BuiltinFeatureProvider(FeatureProvider):
    """Gradient-pyramid perceptual proxy and histogram-embedding proxy."""

    levels = 3

    def perceptual(self, a, b, mask=None) -> float:
        return self.perceptual_with_grad(a, b, mask)[0]

    def perceptual_with_grad(self, a, b, mask=None):
        _check_same_shape(a, b)
        mask = _full_mask(a) if mask is None else mask
        pyr_a = iops.pyramid(a, self.levels)
        pyr_b = iops.pyramid(b, self.levels)
        value = 0.0
        level_grads = []
        m = mask
        for la, lb in zip(pyr_a, pyr_b):
            gm_a, cache_a = iops.gradient_magnitude(la)
            gm_b, _ = iops.gradient_magnitude(lb)
            term, g_gm = photometric_l1_with_grad(gm_a, gm_b, m)
            value += term / self.levels
            level_grads.append(
                iops.gradient_magnitude_backward(cache_a, g_gm) / self.levels)
            m = iops.mask_downsample(m)
        grad = iops.pyramid_adjoint(level_grads, [l.shape for l in pyr_a])
        return value, grad

    def embed(self, image, mask=None) -> np.ndarray:
        return self._embed_cached(image, mask)[0]

    def _embed_cached(self, image, mask=None):
        mask = _full_mask(image) if mask is None else mask
        if not mask.any():
            raise EmptyMask("cannot embed an image with an empty mask")
        hc, cache_c = iops.soft_color_histogram(image, mask)
        ho, cache_o = iops.soft_orientation_histogram(image, mask)
        uc, nc = _normalize(hc)
        uo, no = _normalize(ho)
        raw = np.concatenate([uc, uo])
        e, ne = _normalize(raw)
        cache = {"cache_c": cache_c, "cache_o": cache_o, "uc": uc, "nc": nc,
                 "uo": uo, "no": no, "e": e, "ne": ne, "split": hc.size}
        return e, cache

    def _embed_backward(self, cache, g_e):
        g_raw = _normalize_backward(cache["e"], cache["ne"], g_e)
        s = cache["split"]
        g_hc = _normalize_backward(cache["uc"], cache["nc"], g_raw[:s])
        g_ho = _normalize_backward(cache["uo"], cache["no"], g_raw[s:])
        return (iops.soft_color_histogram_backward(cache["cache_c"], g_hc)
                + iops.soft_orientation_histogram_backward(cache["cache_o"],
                                                           g_ho))

    def semantic_with_grad(self, a, b, mask=None):
        """1 - cosine with gradient with respect to the first image."""
        try:
            ea, cache = self._embed_cached(a, mask)
            eb = self.embed(b, mask)
        except EmptyMask:
            return 0.0, np.zeros_like(a)
        value = float(1.0 - np.dot(ea, eb))
        return value, self._embed_backward(cache, -eb)


class ConstantZeroProvider(FeatureProvider):
    """Degenerate provider: zero distance, fixed unit embedding."""

    def perceptual(self, a, b, mask=None) -> float:
        return 0.0

    def embed(self, image, mask=None) -> np.ndarray:
        e = np.zeros(8)
        e[0] = 1.0
        return e


_DEFAULT_PROVIDER = BuiltinFeatureProvider()


def builtin_perceptual(a: np.ndarray, b: np.ndarray,
                       mask: np.ndarray | None = None) -> float:
    return _DEFAULT_PROVIDER.perceptual(a, b, mask)


def builtin_semantic(a: np.ndarray, b: np.ndarray,
                     mask: np.ndarray | None = None) -> float:
    return _DEFAULT_PROVIDER.semantic(a, b, mask)


# ------------------------------------------------------------ tracking loss

def tracking_loss(view, out, w: LossWeights, provider: FeatureProvider,
                  use_mask: bool) -> float:
    """Weighted photometric + perceptual + semantic + depth objective.

    `view` supplies the generated image and aligned depth; `out` is the
    rendering at the current pose estimate.  With use_mask the terms are
    restricted to the rendering's visibility mask.
    """
    mask = out.visibility if use_mask else _full_mask(out.rgb)
    return (w.photometric * photometric_l1(out.rgb, view.image, mask)
            + w.perceptual * provider.perceptual(out.rgb, view.image, mask)
            + w.semantic * provider.semantic(out.rgb, view.image, mask)
            + w.depth * depth_l1(out.depth, view.depth, mask))


def tracking_loss_with_grads(view, out, w: LossWeights,
                             provider: FeatureProvider, use_mask: bool):
    """Loss plus adjoint images (d loss / d rgb, d loss / d depth).

    Providers without gradient hooks contribute value only; the visibility
    mask itself is treated as constant.
    """
    mask = out.visibility if use_mask else _full_mask(out.rgb)
    g_rgb = np.zeros_like(out.rgb)
    g_depth = np.zeros_like(out.depth)

    l1, g = photometric_l1_with_grad(out.rgb, view.image, mask)
    g_rgb += w.photometric * g

    if hasattr(provider, "perceptual_with_grad"):
        perc, g = provider.perceptual_with_grad(out.rgb, view.image, mask)
        g_rgb += w.perceptual * g
    else:
        perc = provider.perceptual(out.rgb, view.image, mask)

    if hasattr(provider, "semantic_with_grad"):
        sem, g = provider.semantic_with_grad(out.rgb, view.image, mask)
        g_rgb += w.semantic * g
    else:
        sem = provider.semantic(out.rgb, view.image, mask)

    dep, g = depth_l1_with_grad(out.depth, view.depth, mask)
    g_depth += w.depth * g

    value = (w.photometric * l1 + w.perceptual * perc
             + w.semantic * sem + w.depth * dep)
    return value, g_rgb, g_depth


# ---------------------------------------------------------------- base loss

def _track_term(projected: np.ndarray, targets: np.ndarray):
    """Mean 2-d reprojection distance and its gradient on the projections.

    Rows of `targets` with any non-finite entry are skipped.
    """
    grad = np.zeros_like(projected)
    if projected.shape[0] == 0:
        return 0.0, grad
    if projected.shape != targets.shape:
        raise ShapeMismatch(
            f"track shapes differ: {projected.shape} vs {targets.shape}")
    valid = np.isfinite(targets).all(axis=1)
    if not valid.any():
        return 0.0, grad
    diff = projected[valid] - targets[valid]
    dist = np.linalg.norm(diff, axis=1)
    value = float(dist.mean())
    safe = np.where(dist > 1e-12, dist, 1.0)
    g = diff / safe[:, None] / valid.sum()
    g[dist <= 1e-12] = 0.0
    grad[valid] = g
    return value, grad


def base_loss(frame: np.ndarray, depth_prior: np.ndarray,
              track_targets: np.ndarray, out, projected_tracks: np.ndarray,
              w: BaseLossWeights | None = None) -> float:
    value, _, _, _ = base_loss_with_grads(frame, depth_prior, track_targets,
                                          out, projected_tracks, w)
    return value


def base_loss_with_grads(frame: np.ndarray, depth_prior: np.ndarray,
                         track_targets: np.ndarray, out,
                         projected_tracks: np.ndarray,
                         w: BaseLossWeights | None = None):
    """Reconstruction objective against an original frame and its priors.

    Returns (value, d/d rgb, d/d depth, d/d projected_tracks).
    """
    if frame is None or depth_prior is None:
        raise MissingPrior("base loss needs the frame and its depth prior")
    w = w or BaseLossWeights()

    l1, g_l1 = photometric_l1_with_grad(out.rgb, frame)
    s, g_s = iops.ssim_with_grad(out.rgb, frame)
    dep, g_d = depth_l1_with_grad(out.depth, depth_prior)
    trk, g_t = _track_term(projected_tracks, track_targets)

    value = (w.photometric * l1 + w.ssim * (1.0 - s)
             + w.depth * dep + w.track * trk)
    g_rgb = w.photometric * g_l1 - w.ssim * g_s
    g_depth = w.depth * g_d
    g_tracks = w.track * g_t
    return value, g_rgb, g_depth, g_tracks
