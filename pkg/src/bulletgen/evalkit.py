"""Novel-view synthesis and point-tracking metrics.

The 2-d tracking metrics follow the TAP-Vid conventions: position
thresholds {1, 2, 4, 8, 16} pixels at 256 x 256-normalized resolution,
Jaccard over true positives / (ground-truth visible + false positives),
and occlusion accuracy as plain agreement of visibility flags.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ._imageops import ssim as _ssim_impl
from .errors import EmptyMask, NoValidPoints, ShapeMismatch, UncoveredQuery
from .geometry import Camera, backproject, project
from .rendering import render
from .scene import GaussianKind, pose_all_at_time

PIXEL_THRESHOLDS = (1.0, 2.0, 4.0, 8.0, 16.0)
NORMALIZED_SIZE = 256.0

# A surface is treated as occluding a track point when the rendered depth
# at its pixel is nearer by more than this fraction of the point's depth.
OCCLUSION_DEPTH_MARGIN = 0.01


@dataclass
class TrackAnnotations:
    points3d: np.ndarray
    visibility: np.ndarray

    def __post_init__(self):
        if self.points3d.shape[:2] != self.visibility.shape:
            raise ShapeMismatch("points3d and visibility disagree on T x P")


@dataclass
class MetricReport:
    psnr: float | None = None
    ssim: float | None = None
    perceptual: float | None = None
    semantic_similarity: float | None = None
    epe: float | None = None
    delta_3d_05: float | None = None
    delta_3d_10: float | None = None
    aj: float | None = None
    delta_avg: float | None = None
    oa: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------- image metrics

def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    if a.shape != b.shape:
        raise ShapeMismatch(f"psnr shapes differ: {a.shape} vs {b.shape}")
    if mask is not None:
        if not mask.any():
            raise EmptyMask("psnr over an empty mask")
        sq = (a - b) ** 2
        mse = float(sq[mask].mean())
    else:
        mse = float(((a - b) ** 2).mean())
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def ssim(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    return _ssim_impl(a, b, mask)


# ---------------------------------------------------------------- 3d tracks

def _valid_entries(pred: np.ndarray, gt: TrackAnnotations) -> np.ndarray:
    if pred.shape != gt.points3d.shape:
        raise ShapeMismatch(
            f"track shapes differ: {pred.shape} vs {gt.points3d.shape}")
    return gt.visibility & np.isfinite(gt.points3d).all(axis=-1)


def epe_3d(pred: np.ndarray, gt: TrackAnnotations) -> float:
    valid = _valid_entries(pred, gt)
    if not valid.any():
        raise NoValidPoints("no visible ground-truth track entries")
    dist = np.linalg.norm(pred - gt.points3d, axis=-1)
    return float(dist[valid].mean())


def delta_3d(pred: np.ndarray, gt: TrackAnnotations, tau: float) -> float:
    valid = _valid_entries(pred, gt)
    if not valid.any():
        raise NoValidPoints("no visible ground-truth track entries")
    dist = np.linalg.norm(pred - gt.points3d, axis=-1)
    return float((dist[valid] < tau).mean())


# ---------------------------------------------------------------- 2d tracks

def tracking_2d_metrics(pred2d: np.ndarray, pred_occluded: np.ndarray,
                        gt2d: np.ndarray, gt_occluded: np.ndarray,
                        size: tuple[int, int] | None = None):
    """(aj, delta_avg, oa) under TAP-Vid conventions.

    Coordinates are taken as already 256-normalized unless `size` (width,
    height) is given, in which case they are rescaled per axis.
    """
    if pred2d.shape != gt2d.shape or pred_occluded.shape != gt_occluded.shape:
        raise ShapeMismatch("prediction and ground-truth shapes differ")
    if pred2d.shape[:-1] != pred_occluded.shape or pred2d.shape[-1] != 2:
        raise ShapeMismatch("tracks must be (..., 2) with matching flags")
    pred2d = np.asarray(pred2d, dtype=np.float64)
    gt2d = np.asarray(gt2d, dtype=np.float64)
    if size is not None:
        scale = np.array([NORMALIZED_SIZE / size[0], NORMALIZED_SIZE / size[1]])
        pred2d = pred2d * scale
        gt2d = gt2d * scale

    gt_vis = ~gt_occluded
    pred_vis = ~pred_occluded
    sq_dist = np.sum((pred2d - gt2d) ** 2, axis=-1)

    n_vis = int(gt_vis.sum())
    deltas = []
    jaccards = []
    for tau in PIXEL_THRESHOLDS:
        within = sq_dist < tau * tau
        if n_vis > 0:
            deltas.append(float(within[gt_vis].mean()))
        tp = int((gt_vis & pred_vis & within).sum())
        fp = int((pred_vis & (~gt_vis | ~within)).sum())
        denom = n_vis + fp
        jaccards.append(1.0 if denom == 0 else tp / denom)

    delta_avg = float(np.mean(deltas)) if deltas else 1.0
    aj = float(np.mean(jaccards))
    oa = float((pred_occluded == gt_occluded).mean())
    return aj, delta_avg, oa


def project_tracks(scene, points3d: np.ndarray, cameras: list[Camera]):
    """Pinhole-project per-frame 3-d points and flag occlusions.

    A point is occluded when it falls outside the frame, sits behind the
    camera, carries non-finite coordinates, or the scene renders a surface
    more than 1% nearer at its pixel.
    """
    n_frames, n_points = points3d.shape[:2]
    if len(cameras) != n_frames:
        raise ShapeMismatch(f"{len(cameras)} cameras for {n_frames} frames")
    tracks = np.zeros((n_frames, n_points, 2))
    occluded = np.ones((n_frames, n_points), dtype=bool)
    for f, cam in enumerate(cameras):
        out = render(scene, cam, cam.time)
        pts = points3d[f]
        finite = np.isfinite(pts).all(axis=1)
        cam_pts = cam.world_to_camera().apply(pts[finite])
        z = cam_pts[:, 2]
        front = z > 1e-8
        uv = np.full((int(finite.sum()), 2), np.nan)
        if front.any():
            k = cam.intrinsics
            uv[front, 0] = k.fx * cam_pts[front, 0] / z[front] + k.cx
            uv[front, 1] = k.fy * cam_pts[front, 1] / z[front] + k.cy
        tracks[f, finite] = uv
        u, v = uv[:, 0], uv[:, 1]
        in_frame = (front & (u >= 0) & (u <= k.width - 1)
                    & (v >= 0) & (v <= k.height - 1))
        vis = np.zeros(int(finite.sum()), dtype=bool)
        idx = np.nonzero(in_frame)[0]
        if idx.size:
            ui = np.clip(np.rint(u[idx]).astype(int), 0, k.width - 1)
            vi = np.clip(np.rint(v[idx]).astype(int), 0, k.height - 1)
            rendered = out.depth[vi, ui]
            covered = out.silhouette[vi, ui] > 1e-8
            nearer = covered & (z[idx] - rendered
                                > OCCLUSION_DEPTH_MARGIN * z[idx])
            vis[idx] = ~nearer
        occluded[f, finite] = ~vis
    return tracks, occluded


# --------------------------------------------------------------- track query

def track_query(scene, camera: Camera, frame: int,
                pixel: tuple[float, float]) -> np.ndarray:
    """Predicted T x 3 world track for a query pixel at a query frame.

    The query attaches to the nearest Gaussian along the pixel ray
    (distance to the ray plus distance to the rendered depth); a static
    anchor yields a constant track, a dynamic one its blended trajectory
    carried rigidly through the attachment offset.
    """
    out = render(scene, camera, frame)
    u, v = pixel
    ui = int(np.clip(np.rint(u), 0, camera.intrinsics.width - 1))
    vi = int(np.clip(np.rint(v), 0, camera.intrinsics.height - 1))
    if out.silhouette[vi, ui] <= 0.5:
        raise UncoveredQuery(
            f"pixel ({u}, {v}) has silhouette {out.silhouette[vi, ui]:.3f}")
    depth = float(out.depth[vi, ui])
    anchor_world = camera.pose.apply(
        backproject(camera, np.array([float(u)]), np.array([float(v)]),
                    np.array([depth])))[0]

    posed, _, _ = pose_all_at_time(scene, frame)
    origin = camera.center()
    direction = anchor_world - origin
    direction = direction / np.linalg.norm(direction)
    rel = posed - origin
    along = rel @ direction
    ray_dist_sq = np.sum((rel - along[:, None] * direction[None, :]) ** 2,
                         axis=1)
    score = ray_dist_sq + (along - depth) ** 2
    nearest = int(np.argmin(score))

    n_frames = scene.n_frames
    if scene.kinds[nearest] == GaussianKind.STATIC:
        return np.tile(anchor_world, (n_frames, 1))
    track = np.zeros((n_frames, 3))
    for t in range(1, n_frames + 1):
        pt, _, _ = pose_all_at_time(scene, t)
        track[t - 1] = pt[nearest]
    offset = anchor_world - track[frame - 1]
    return track + offset
