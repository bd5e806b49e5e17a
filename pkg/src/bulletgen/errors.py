"""Exception types raised across the engine.

Everything derives from BulletGenError so callers (and the CLI) can catch
engine failures distinctly from programming errors.
"""


class BulletGenError(Exception):
    """Base class for all engine errors."""


class BehindCamera(BulletGenError):
    """Point is at or behind the camera plane (z <= eps in camera frame)."""


class NonPositiveDepth(BulletGenError):
    """Backprojection requested with depth <= 0."""


class TimeOutOfRange(BulletGenError):
    """Frame time outside [1, n_frames]."""


class NearSingularBlend(BulletGenError):
    """Blended quaternion sum has near-zero norm; weights cancel."""


class SchemaVersionMismatch(BulletGenError):
    """Serialized payload has wrong magic or unsupported schema version."""


class ShapeMismatch(BulletGenError):
    """Array arguments disagree on shape."""


class Culled(BulletGenError):
    """Gaussian does not reach the image (behind near plane or footprint off-screen)."""


class EmptyMask(BulletGenError):
    """Loss mask selects zero pixels."""


class MissingPrior(BulletGenError):
    """Dataset lacks a required prior (depth, pose, mask, or tracks)."""


class InsufficientCovisibility(BulletGenError):
    """Too few covisible pixels to align depth scale."""


class DegenerateVisibility(BulletGenError):
    """Visibility mask covers under 1% of the image; pose loss is undefined."""


class EmptyPool(BulletGenError):
    """No candidate views/cameras available to select from."""


class GeneratorUnavailable(BulletGenError):
    """Generator backend did not produce a response."""


class FrameCountMismatch(BulletGenError):
    """Generator returned a different number of frames than requested."""


class InvalidCount(BulletGenError):
    """Requested count outside the valid range."""


class NonFiniteGradient(BulletGenError):
    """Optimizer received a NaN/Inf gradient."""


class NoValidPoints(BulletGenError):
    """Metric computation received zero valid points."""


class UncoveredQuery(BulletGenError):
    """Track query pixel is not covered by the rendered silhouette."""


class ConfigError(BulletGenError):
    """Config file is malformed or carries unknown/invalid keys."""


class DataError(BulletGenError):
    """Dataset file is malformed or inconsistent with its sidecars."""
