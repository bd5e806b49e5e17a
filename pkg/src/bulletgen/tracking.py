"""Localizing generated views against a frozen scene.

A generated view arrives with an image, a monocular depth map (up to an
unknown global scale), and a pose guess.  This module aligns the depth
scale to the current reconstruction, refines the pose by gradient descent
on the tracking loss restricted to the visibility mask, and applies the
prefix acceptance gate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import losses
from ._imageops import bilinear_sample
from .errors import DegenerateVisibility, InsufficientCovisibility
from .geometry import SE3, Camera, camera_tangent_apply
from .optim import AdamOptimizer
from .rendering import render, render_with_grads

MIN_COVISIBLE_PIXELS = 100
MIN_VISIBLE_FRACTION = 0.01

# Virtual horizontal baseline (fraction of image width) used to turn a
# depth-scale error into an RGB resampling error during scale search.
PARALLAX_FRACTION = 0.1

GOLDEN_ITERS = 60


@dataclass
class GeneratedView:
    image: np.ndarray
    depth: np.ndarray
    pose: SE3
    bullet_time: int
    generation_index: int
    loss: float | None = None
    accepted: bool = False


@dataclass
class GateConfig:
    gamma: float = 0.4


@dataclass
class PoseOptConfig:
    iterations: int = 100
    lr_rotation: float = 5e-3
    lr_translation_per_extent: float = 5e-3
    # The L1-style terms keep gradient magnitude O(1) arbitrarily close to
    # the optimum, so constant-rate ADAM orbits the solution at step size;
    # cosine decay to this floor fraction shrinks the orbit instead.
    lr_floor_fraction: float = 0.01
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)

    def lr_scale(self, t: int) -> float:
        cos = 0.5 * (1.0 + np.cos(np.pi * t / self.iterations))
        return self.lr_floor_fraction + (1.0 - self.lr_floor_fraction) * cos


# --------------------------------------------------------------- depth scale

def _scale_objective(scale: float, raw_depth: np.ndarray, render_out,
                     view_image: np.ndarray, covisible: np.ndarray) -> float:
    depth_term = losses.depth_l1(scale * raw_depth, render_out.depth, covisible)
    h, w = raw_depth.shape
    u, v = np.meshgrid(np.arange(w, dtype=np.float64),
                       np.arange(h, dtype=np.float64))
    # disparity mismatch against the reconstruction shifts the sample point;
    # at the correct scale the shift vanishes and the warp is the identity
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(covisible, render_out.depth / (scale * raw_depth), 1.0)
    ratio = np.clip(np.nan_to_num(ratio, nan=1.0, posinf=1.0, neginf=1.0),
                    0.0, 4.0)
    shift = PARALLAX_FRACTION * w * (ratio - 1.0)
    warped = bilinear_sample(view_image, u + shift, v)
    rgb_term = losses.photometric_l1(warped, render_out.rgb, covisible)
    return depth_term + 0.5 * rgb_term


def align_depth_scale(raw_depth: np.ndarray, render_out,
                      view_image: np.ndarray) -> float:
    """Global scale aligning a raw depth map to the reconstruction.

    Closed-form least squares over the covisible region, refined by a
    golden-section search on the combined depth + RGB objective.
    """
    covisible = (render_out.visibility & np.isfinite(raw_depth)
                 & (raw_depth > 0))
    n = int(covisible.sum())
    if n < MIN_COVISIBLE_PIXELS:
        raise InsufficientCovisibility(
            f"only {n} covisible pixels, need {MIN_COVISIBLE_PIXELS}")
    d = raw_depth[covisible]
    r = render_out.depth[covisible]
    denom = float(np.dot(d, d))
    if denom <= 0:
        raise InsufficientCovisibility("covisible raw depth is all zero")
    s_star = float(np.dot(d, r)) / denom
    if s_star <= 0:
        raise InsufficientCovisibility("least-squares scale is not positive")

    lo, hi = 0.5 * s_star, 2.0 * s_star
    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    c = hi - inv_phi * (hi - lo)
    e = lo + inv_phi * (hi - lo)
    fc = _scale_objective(c, raw_depth, render_out, view_image, covisible)
    fe = _scale_objective(e, raw_depth, render_out, view_image, covisible)
    for _ in range(GOLDEN_ITERS):
        if fc <= fe:
            hi, e, fe = e, c, fc
            c = hi - inv_phi * (hi - lo)
            fc = _scale_objective(c, raw_depth, render_out, view_image,
                                  covisible)
        else:
            lo, c, fc = c, e, fe
            e = lo + inv_phi * (hi - lo)
            fe = _scale_objective(e, raw_depth, render_out, view_image,
                                  covisible)
    return float((lo + hi) / 2.0)


# ----------------------------------------------------------------- pose opt

def optimize_pose(scene, view: GeneratedView, provider: losses.FeatureProvider,
                  cfg: PoseOptConfig | None = None,
                  intrinsics=None) -> tuple[SE3, float]:
    """Refine the view pose against the frozen scene.

    Runs ADAM on the camera's 6-dof tangent, minimizing the masked tracking
    loss.  The scene is never written.  On a view whose visibility mask
    covers less than 1% of pixels the view is marked failed (loss +inf) and
    DegenerateVisibility is raised.
    """
    cfg = cfg or PoseOptConfig()
    if intrinsics is None:
        raise ValueError("optimize_pose needs the view's intrinsics")
    pose = view.pose
    extent = scene.extent()
    opt = AdamOptimizer()
    n_pixels = view.image.shape[0] * view.image.shape[1]

    def degenerate(out) -> bool:
        return out.visibility.sum() < MIN_VISIBLE_FRACTION * n_pixels

    for it in range(cfg.iterations):
        cam = Camera(pose=pose, intrinsics=intrinsics, time=view.bullet_time)
        out = render(scene, cam, view.bullet_time)
        if degenerate(out):
            view.loss = float("inf")
            view.accepted = False
            raise DegenerateVisibility(
                "visibility mask below 1% of pixels during pose refinement")
        _, g_rgb, g_depth = losses.tracking_loss_with_grads(
            view, out, cfg.weights, provider, use_mask=True)
        _, grads = render_with_grads(scene, cam, view.bullet_time,
                                     grad_rgb=g_rgb, grad_depth=g_depth)
        decay = cfg.lr_scale(it)
        step_rot = opt.step("rot", np.zeros(3), grads.camera[:3],
                            cfg.lr_rotation * decay)
        step_trans = opt.step("trans", np.zeros(3), grads.camera[3:],
                              cfg.lr_translation_per_extent * extent * decay)
        pose = camera_tangent_apply(pose,
                                    np.concatenate([step_rot, step_trans]))

    cam = Camera(pose=pose, intrinsics=intrinsics, time=view.bullet_time)
    out = render(scene, cam, view.bullet_time)
    if degenerate(out):
        view.loss = float("inf")
        view.accepted = False
        raise DegenerateVisibility("visibility mask below 1% at final pose")
    final_loss = losses.tracking_loss(view, out, cfg.weights, provider,
                                      use_mask=True)
    view.pose = pose
    view.loss = float(final_loss)
    return pose, float(final_loss)


# -------------------------------------------------------------------- gating

def accept_prefix(views: list[GeneratedView], gate: GateConfig) -> int:
    """Keep views up to (not including) the first one with loss > gamma."""
    k_prime = len(views)
    for i, view in enumerate(views):
        if view.loss is None:
            raise ValueError(f"view {i} has no loss; run optimize_pose first")
        if view.loss > gate.gamma:
            k_prime = i
            break
    for i, view in enumerate(views):
        view.accepted = i < k_prime
    return k_prime
