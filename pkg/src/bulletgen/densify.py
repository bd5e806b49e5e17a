"""Densification: find under-covered pixels and insert Gaussians there.

The mask marks pixels the reconstruction either does not cover (low
silhouette) or covers with geometry behind the generated depth by more
than a tolerance tied to the median depth error.  Each masked pixel then
receives one Gaussian backprojected from the view, inheriting kind and
motion weights from its nearest existing neighbor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Camera, Intrinsics, backproject
from .scene import (
    GaussianKind,
    GaussianScene,
    MotionBasisBank,
    _blend_arrays,
    pose_all_at_time,
)


@dataclass
class DensifyConfig:
    silhouette_threshold: float = 0.5
    lam: float = 50.0
    mde_floor: float = 1e-6
    stride: int = 1
    # A bare one-pixel footprint composes to ~0.99 silhouette in a filled
    # hole interior, right at the visibility threshold; sqrt(2) gives the
    # coverage real margin (~0.9997).
    scale_multiplier: float = float(np.sqrt(2.0))


def densification_mask(view, out, cfg: DensifyConfig | None = None) -> np.ndarray:
    """Boolean H x W mask of pixels needing new Gaussians.

    A pixel qualifies when the rendered silhouette is thin, or when the
    view sees valid geometry in front of the rendering by less than
    lam x (median covisible depth error).
    """
    cfg = cfg or DensifyConfig()
    d_k = view.depth
    r_d = out.depth
    r_s = out.silhouette
    valid = np.isfinite(d_k) & (d_k > 0)

    covisible = out.visibility & valid
    if covisible.any():
        mde = float(np.median(np.abs(d_k - r_d)[covisible]))
    else:
        mde = 0.0
    mde = max(mde, cfg.mde_floor)

    thin = r_s < cfg.silhouette_threshold
    in_front = (d_k < r_d) & (np.abs(d_k - r_d) < cfg.lam * mde)
    return valid & (thin | in_front)


def insert_gaussians(scene: GaussianScene, view, mask: np.ndarray,
                     intrinsics: Intrinsics,
                     cfg: DensifyConfig | None = None) -> tuple[GaussianScene, int]:
    """Insert one Gaussian per masked pixel (row-major, stride-subsampled).

    Returns the grown scene and the insertion count.  Kind and motion
    weights come from the nearest existing Gaussian with dynamic ones posed
    at the view's bullet time; an empty scene defaults everything to
    static.  A dynamic insertion stores the canonical position that lands
    exactly on the backprojected point at that time.
    """
    cfg = cfg or DensifyConfig()
    t = view.bullet_time
    selected = mask.copy()
    if cfg.stride > 1:
        grid = np.zeros_like(mask)
        grid[::cfg.stride, ::cfg.stride] = True
        selected &= grid
    vs, us = np.nonzero(selected)
    count = len(vs)
    if count == 0:
        return scene, 0

    cam = Camera(pose=view.pose, intrinsics=intrinsics, time=t)
    depths = view.depth[vs, us]
    points_cam = backproject(cam, us.astype(np.float64),
                             vs.astype(np.float64), depths)
    points_world = view.pose.apply(points_cam)

    n_bases = scene.n_bases
    if scene.n_gaussians > 0:
        posed, _, _ = pose_all_at_time(scene, t)
        tree = cKDTree(posed)
        _, nn = tree.query(points_world)
        kinds = scene.kinds[nn]
        logits = scene.motion_logits[nn].copy()
    else:
        kinds = np.full(count, int(GaussianKind.STATIC), dtype=np.uint8)
        logits = np.zeros((count, n_bases))

    positions = points_world.copy()
    dyn = kinds == GaussianKind.DYNAMIC
    if dyn.any():
        transforms = _blend_arrays(logits[dyn], scene.bank, t)
        q, tr = transforms["qblend"], transforms["tblend"]
        # canonical point = inverse blend of the world point, so that
        # pose_at_time(t) reproduces the backprojected point exactly
        from .geometry import quat_conjugate, quat_rotate

        positions[dyn] = quat_rotate(quat_conjugate(q), points_world[dyn] - tr)

    rotations = np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (count, 1))
    scales = np.log(np.maximum(
        cfg.scale_multiplier * depths / intrinsics.fx, 1e-12))
    addition = GaussianScene(
        positions=positions,
        rotations=rotations,
        log_scales=np.repeat(scales[:, None], 3, axis=1),
        logit_opacities=np.zeros(count),
        colors=view.image[vs, us].astype(np.float64).copy(),
        kinds=kinds,
        motion_logits=logits,
        bank=scene.bank,
        background=scene.background,
        n_frames=scene.n_frames,
    )
    return scene.append(addition), count
