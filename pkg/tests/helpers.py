"""Shared scene/camera builders for the test suite."""

import numpy as np

from bulletgen.geometry import SE3, Camera, Intrinsics, Quat, look_at, quat_normalize
from bulletgen.scene import GaussianScene, MotionBasisBank


def make_camera(width=64, height=64, fx=60.0, fy=None, pose=None, time=1):
    if fy is None:
        fy = fx
    if pose is None:
        pose = SE3.identity()
    k = Intrinsics(fx=fx, fy=fy, cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                   width=width, height=height)
    return Camera(pose=pose, intrinsics=k, time=time)


def render_scene(seed, n=40, n_bases=3, n_frames=4, dynamic_frac=0.5,
                 center=(0.0, 0.0, 4.0), spread=1.2, sigma_world=0.12,
                 opacity_lo=-1.0, opacity_hi=2.0, motion_scale=0.15):
    """Random scene sitting in front of the identity camera."""
    rng = np.random.default_rng(seed)
    center = np.asarray(center, dtype=np.float64)
    kinds = (rng.uniform(size=n) < dynamic_frac).astype(np.uint8)
    quats = quat_normalize(rng.normal(size=(n_bases, n_frames, 4)) * 0.1
                           + np.array([1.0, 0, 0, 0]))
    trans = motion_scale * rng.normal(size=(n_bases, n_frames, 3))
    # keep frame 1 near identity so canonical space is frame 1
    quats[:, 0] = np.array([1.0, 0, 0, 0])
    trans[:, 0] = 0.0
    bank = MotionBasisBank(quats, trans)
    scene = GaussianScene(
        positions=center + spread * rng.uniform(-1, 1, size=(n, 3)),
        rotations=quat_normalize(rng.normal(size=(n, 4))),
        log_scales=np.log(sigma_world) + 0.3 * rng.normal(size=(n, 3)),
        logit_opacities=rng.uniform(opacity_lo, opacity_hi, size=n),
        colors=rng.uniform(size=(n, 3)),
        kinds=kinds,
        motion_logits=rng.normal(size=(n, n_bases)),
        bank=bank,
        background=rng.uniform(0.0, 0.3, size=3),
        n_frames=n_frames,
    )
    return scene


def orbit_camera(azimuth_deg, target=(0.0, 0.0, 4.0), radius=4.0,
                 elevation_deg=0.0, width=64, height=64, fx=60.0, time=1):
    """Camera on an orbit around a target in the y-down world."""
    az = np.deg2rad(azimuth_deg)
    el = np.deg2rad(elevation_deg)
    target = np.asarray(target, dtype=np.float64)
    offset = radius * np.array([np.sin(az) * np.cos(el),
                                -np.sin(el),
                                -np.cos(az) * np.cos(el)])
    pose = look_at(target + offset, target)
    return make_camera(width=width, height=height, fx=fx, pose=pose, time=time)


def wall_scene(seed, width=48, height=48, fx=43.2, nx=14, ny=14, z=4.0,
               depth_ripple=0.25, opacity_logit=5.0, n_frames=1):
    """Dense textured wall filling the identity camera's frustum.

    Gaussians on a jittered grid with footprints that overlap enough to
    push the silhouette above the visibility threshold almost everywhere.
    """
    rng = np.random.default_rng(seed)
    half_w = (width / 2.0) / fx * z * 0.95
    half_h = (height / 2.0) / fx * z * 0.95
    xs = np.linspace(-half_w, half_w, nx)
    ys = np.linspace(-half_h, half_h, ny)
    gx, gy = np.meshgrid(xs, ys)
    n = nx * ny
    spacing = 2 * half_w / (nx - 1)
    pos = np.stack([gx.ravel(), gy.ravel(),
                    z + depth_ripple * np.sin(3.0 * gx.ravel())
                    + 0.02 * rng.standard_normal(n)], axis=1)
    bank = MotionBasisBank.identity(n_bases=1, n_frames=n_frames)
    return GaussianScene(
        positions=pos,
        rotations=np.tile(np.array([1.0, 0, 0, 0]), (n, 1)),
        log_scales=np.full((n, 3), np.log(spacing * 0.8)),
        logit_opacities=np.full(n, opacity_logit),
        colors=rng.uniform(0.05, 0.95, size=(n, 3)),
        kinds=np.zeros(n, dtype=np.uint8),
        motion_logits=np.zeros((n, 1)),
        bank=bank,
        background=np.zeros(3),
        n_frames=n_frames,
    )
