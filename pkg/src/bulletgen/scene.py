"""Scene model: Gaussian soup, per-frame motion bases, and pose blending.

Storage is struct-of-arrays float64. Dynamic Gaussians carry per-basis weight
logits; their pose at frame t is the softmax-weighted blend of the bank's
per-frame rigid transforms applied to the canonical pose. Canonical space is
frame 1 by bootstrap convention.

motion_logits is dense (n_gaussians, n_bases); rows of static Gaussians are
inert (identically zero gradient, so optimizers never move them).
"""

from __future__ import annotations

import enum
import hashlib
import io
import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from .errors import (
    DataError,
    NearSingularBlend,
    SchemaVersionMismatch,
    ShapeMismatch,
    TimeOutOfRange,
)
from .geometry import (
    SE3,
    Quat,
    quat_mul_left_matrix,
    quat_mul_right_matrix,
    quat_multiply,
    quat_normalize,
    quat_normalize_backward,
    quat_to_matrix,
    quat_to_matrix_jacobian,
)

SCENE_MAGIC = b"BGSC"
SCENE_VERSION = 1
BLEND_NORM_EPS = 1e-6


class GaussianKind(enum.IntEnum):
    STATIC = 0
    DYNAMIC = 1


@dataclass
class Gaussian:
    """Single-Gaussian view, mostly for construction and tests."""

    position: np.ndarray
    rotation: Quat
    log_scale: np.ndarray
    logit_opacity: float
    color: np.ndarray
    kind: GaussianKind = GaussianKind.STATIC

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)


@dataclass
class MotionBasisBank:
    """Global bank of per-frame rigid transforms, one row per basis.

    quats: (n_bases, n_frames, 4) raw quaternions, normalized on read
    trans: (n_bases, n_frames, 3)
    """

    quats: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        self.quats = np.asarray(self.quats, dtype=np.float64)
        self.trans = np.asarray(self.trans, dtype=np.float64)
        if self.quats.ndim != 3 or self.quats.shape[2] != 4:
            raise ShapeMismatch(f"basis quats shape {self.quats.shape}")
        if self.trans.shape != self.quats.shape[:2] + (3,):
            raise ShapeMismatch(
                f"basis trans shape {self.trans.shape} vs quats {self.quats.shape}")

    @property
    def n_bases(self) -> int:
        return self.quats.shape[0]

    @property
    def n_frames(self) -> int:
        return self.quats.shape[1]

    @staticmethod
    def identity(n_bases: int, n_frames: int) -> "MotionBasisBank":
        q = np.zeros((n_bases, n_frames, 4))
        q[..., 0] = 1.0
        return MotionBasisBank(q, np.zeros((n_bases, n_frames, 3)))

    def transform(self, b: int, t: int) -> SE3:
        return SE3(Quat.from_array(quat_normalize(self.quats[b, t - 1])),
                   self.trans[b, t - 1].copy())


@dataclass
class GaussianScene:
    positions: np.ndarray        # (N, 3) canonical centers
    rotations: np.ndarray        # (N, 4) raw quats, normalized on read
    log_scales: np.ndarray       # (N, 3)
    logit_opacities: np.ndarray  # (N,)
    colors: np.ndarray           # (N, 3) in [0, 1]
    kinds: np.ndarray            # (N,) uint8, GaussianKind values
    motion_logits: np.ndarray    # (N, B); static rows inert
    bank: MotionBasisBank
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    n_frames: int = 1

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = self.positions.shape[0]
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.logit_opacities = np.asarray(self.logit_opacities, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        self.kinds = np.asarray(self.kinds, dtype=np.uint8).reshape(n)
        self.motion_logits = np.asarray(self.motion_logits, dtype=np.float64).reshape(
            n, self.bank.n_bases)
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        if self.bank.n_frames != self.n_frames:
            raise ShapeMismatch(
                f"bank covers {self.bank.n_frames} frames, scene says {self.n_frames}")

    @property
    def n_gaussians(self) -> int:
        return self.positions.shape[0]

    @property
    def n_bases(self) -> int:
        return self.bank.n_bases

    def dynamic_mask(self) -> np.ndarray:
        return self.kinds == GaussianKind.DYNAMIC

    def extent(self) -> float:
        """Bounding-box diagonal of canonical centers (>= 1e-6)."""
        if self.n_gaussians < 2:
            return 1.0
        diag = self.positions.max(axis=0) - self.positions.min(axis=0)
        return max(float(np.linalg.norm(diag)), 1e-6)

    def copy(self) -> "GaussianScene":
        return GaussianScene(
            positions=self.positions.copy(),
            rotations=self.rotations.copy(),
            log_scales=self.log_scales.copy(),
            logit_opacities=self.logit_opacities.copy(),
            colors=self.colors.copy(),
            kinds=self.kinds.copy(),
            motion_logits=self.motion_logits.copy(),
            bank=MotionBasisBank(self.bank.quats.copy(), self.bank.trans.copy()),
            background=self.background.copy(),
            n_frames=self.n_frames,
        )

    @staticmethod
    def empty(n_frames: int, n_bases: int = 1) -> "GaussianScene":
        return GaussianScene(
            positions=np.zeros((0, 3)), rotations=np.zeros((0, 4)),
            log_scales=np.zeros((0, 3)), logit_opacities=np.zeros(0),
            colors=np.zeros((0, 3)), kinds=np.zeros(0, dtype=np.uint8),
            motion_logits=np.zeros((0, n_bases)),
            bank=MotionBasisBank.identity(n_bases, n_frames),
            n_frames=n_frames,
        )

    def append(self, other: "GaussianScene") -> "GaussianScene":
        """New scene with other's Gaussians appended (shared bank shape required)."""
        if other.bank.n_bases != self.bank.n_bases:
            raise ShapeMismatch("appended gaussians use a different basis count")
        return GaussianScene(
            positions=np.concatenate([self.positions, other.positions]),
            rotations=np.concatenate([self.rotations, other.rotations]),
            log_scales=np.concatenate([self.log_scales, other.log_scales]),
            logit_opacities=np.concatenate([self.logit_opacities, other.logit_opacities]),
            colors=np.concatenate([self.colors, other.colors]),
            kinds=np.concatenate([self.kinds, other.kinds]),
            motion_logits=np.concatenate([self.motion_logits, other.motion_logits]),
            bank=self.bank,
            background=self.background,
            n_frames=self.n_frames,
        )


def _check_time(t: int, n_frames: int) -> int:
    ti = int(t)
    if ti != t or ti < 1 or ti > n_frames:
        raise TimeOutOfRange(f"t={t} outside [1, {n_frames}]")
    return ti


# ---------------------------------------------------------------------------
# motion blending


def _blend_arrays(logits: np.ndarray, bank: MotionBasisBank, t: int):
    """Blend bank transforms for each logit row. Returns a cache dict.

    logits: (M, B). Raises NearSingularBlend if any blended quaternion sum has
    norm < 1e-6.
    """
    t = _check_time(t, bank.n_frames)
    qb_raw = bank.quats[:, t - 1]                      # (B, 4)
    qb = quat_normalize(qb_raw)                        # (B, 4)
    tb = bank.trans[:, t - 1]                          # (B, 3)

    shifted = logits - logits.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    w = ex / ex.sum(axis=1, keepdims=True)             # (M, B)

    # sign-align every basis quat to each row's largest-weight basis
    ref = np.argmax(w, axis=1)                         # first max wins ties
    dots = qb @ qb.T                                   # (B, B)
    sign = np.where(dots[ref] < 0.0, -1.0, 1.0)        # (M, B)

    qsum = (w * sign) @ qb                             # (M, 4)
    norm = np.linalg.norm(qsum, axis=1)
    if qsum.shape[0] and norm.min() < BLEND_NORM_EPS:
        raise NearSingularBlend(
            f"blended quaternion norm {norm.min():.3g} < {BLEND_NORM_EPS}")
    qblend = qsum / norm[:, None]
    tblend = w @ tb                                    # (M, 3)
    return {
        "t": t, "qb_raw": qb_raw, "qb": qb, "tb": tb, "w": w, "sign": sign,
        "qsum": qsum, "qblend": qblend, "tblend": tblend,
    }


def _blend_backward(cache, d_qblend: np.ndarray, d_tblend: np.ndarray):
    """Backward through _blend_arrays.

    Returns (d_logits (M,B), d_qb_raw (B,4), d_tb (B,3)).
    """
    w, sign, qb = cache["w"], cache["sign"], cache["qb"]
    d_qsum = quat_normalize_backward(cache["qsum"], d_qblend)      # (M, 4)
    d_w = (d_qsum @ qb.T) * sign                                   # (M, B)
    d_qb = (w * sign).T @ d_qsum                                   # (B, 4)
    d_w += d_tblend @ cache["tb"].T
    d_tb = w.T @ d_tblend                                          # (B, 3)
    # softmax backward
    inner = np.sum(w * d_w, axis=1, keepdims=True)
    d_logits = w * (d_w - inner)
    d_qb_raw = quat_normalize_backward(cache["qb_raw"], d_qb)
    return d_logits, d_qb_raw, d_tb


def blended_transform(weight_logits: np.ndarray, bank: MotionBasisBank, t: int) -> SE3:
    """Softmax-blended rigid transform of the bank at frame t."""
    logits = np.asarray(weight_logits, dtype=np.float64).reshape(1, -1)
    if logits.shape[1] != bank.n_bases:
        raise ShapeMismatch(
            f"{logits.shape[1]} weights for {bank.n_bases} bases")
    c = _blend_arrays(logits, bank, t)
    return SE3(Quat.from_array(c["qblend"][0]), c["tblend"][0])


def pose_at_time(g: Gaussian, weight_logits, bank: MotionBasisBank, t: int):
    """World pose (position, rotation) of one Gaussian at frame t."""
    r0 = Quat.from_array(quat_normalize(g.rotation.as_array()))
    if g.kind == GaussianKind.STATIC:
        _check_time(t, bank.n_frames)
        return g.position.copy(), r0
    tf = blended_transform(weight_logits, bank, t)
    return tf.apply(g.position), (tf.rotation * r0)


def pose_all_at_time(scene: GaussianScene, t: int):
    """Vectorized pose of every Gaussian at frame t.

    Returns (positions (N,3), rotations (N,4) unit, cache) where cache feeds
    pose_all_backward.
    """
    t = _check_time(t, scene.n_frames)
    n = scene.n_gaussians
    r0hat = quat_normalize(scene.rotations)
    pos = scene.positions.copy()
    rot = r0hat.copy()
    dyn = scene.dynamic_mask()
    cache = {"t": t, "dyn": dyn, "r0hat": r0hat, "blend": None,
             "rblend_mat": None}
    if dyn.any():
        bc = _blend_arrays(scene.motion_logits[dyn], scene.bank, t)
        rmat = quat_to_matrix(bc["qblend"])            # (M, 3, 3)
        pos[dyn] = np.einsum("mij,mj->mi", rmat, scene.positions[dyn]) + bc["tblend"]
        rot[dyn] = quat_multiply(bc["qblend"], r0hat[dyn])
        cache["blend"] = bc
        cache["rblend_mat"] = rmat
    return pos, rot, cache


def pose_all_backward(scene: GaussianScene, cache, d_pos: np.ndarray,
                      d_rot: np.ndarray):
    """Backward through pose_all_at_time.

    d_pos (N,3), d_rot (N,4) are adjoints of the returned arrays. Returns a
    dict with gradients for positions, rotations (raw), motion_logits, and the
    bank arrays at the cached frame (full-shape arrays, zero elsewhere).
    """
    dyn = cache["dyn"]
    t = cache["t"]
    n = scene.n_gaussians
    g_positions = np.zeros((n, 3))
    g_r0hat = np.zeros((n, 4))
    g_logits = np.zeros_like(scene.motion_logits)
    g_bank_q = np.zeros_like(scene.bank.quats)
    g_bank_t = np.zeros_like(scene.bank.trans)

    stat = ~dyn
    g_positions[stat] = d_pos[stat]
    g_r0hat[stat] = d_rot[stat]

    if dyn.any():
        bc = cache["blend"]
        rmat = cache["rblend_mat"]
        mu = scene.positions[dyn]
        r0h = cache["r0hat"][dyn]
        qblend = bc["qblend"]

        # rot_out = qblend (x) r0hat
        d_qblend = np.einsum("mqp,mq->mp", quat_mul_right_matrix(r0h), d_rot[dyn])
        g_r0hat[dyn] = np.einsum("mqp,mq->mp", quat_mul_left_matrix(qblend), d_rot[dyn])

        # pos_out = R(qblend) mu + tblend
        g_positions[dyn] = np.einsum("mji,mj->mi", rmat, d_pos[dyn])
        d_rmat = np.einsum("mi,mj->mij", d_pos[dyn], mu)
        d_qblend += np.einsum("mijq,mij->mq", quat_to_matrix_jacobian(qblend), d_rmat)
        d_tblend = d_pos[dyn]

        d_logits, d_qb_raw, d_tb = _blend_backward(bc, d_qblend, d_tblend)
        g_logits[dyn] = d_logits
        g_bank_q[:, t - 1] = d_qb_raw
        g_bank_t[:, t - 1] = d_tb

    g_rotations = quat_normalize_backward(scene.rotations, g_r0hat)
    return {
        "positions": g_positions,
        "rotations": g_rotations,
        "motion_logits": g_logits,
        "basis_quats": g_bank_q,
        "basis_trans": g_bank_t,
    }


# ---------------------------------------------------------------------------
# serialization: magic, version, counts, then packed little-endian arrays


def _write_array(fh: BinaryIO, a: np.ndarray, dtype) -> None:
    fh.write(np.ascontiguousarray(a, dtype=dtype).tobytes())


def _read_array(fh: BinaryIO, shape, dtype) -> np.ndarray:
    want = int(np.prod(shape)) * np.dtype(dtype).itemsize
    raw = fh.read(want)
    if len(raw) != want:
        raise DataError(f"scene file truncated: wanted {want} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(np.float64) \
        if np.dtype(dtype).kind == "f" else \
        np.frombuffer(raw, dtype=dtype).reshape(shape).copy()


def save_scene(scene: GaussianScene, path_or_fh) -> None:
    """Write the scene container (f32 arrays, little-endian)."""
    own = isinstance(path_or_fh, (str, bytes)) or hasattr(path_or_fh, "__fspath__")
    fh = open(path_or_fh, "wb") if own else path_or_fh
    try:
        fh.write(SCENE_MAGIC)
        fh.write(struct.pack("<IQII", SCENE_VERSION, scene.n_gaussians,
                             scene.n_bases, scene.n_frames))
        _write_array(fh, scene.background, "<f4")
        _write_array(fh, scene.positions, "<f4")
        _write_array(fh, scene.rotations, "<f4")
        _write_array(fh, scene.log_scales, "<f4")
        _write_array(fh, scene.logit_opacities, "<f4")
        _write_array(fh, scene.colors, "<f4")
        _write_array(fh, scene.kinds, "u1")
        _write_array(fh, scene.motion_logits, "<f4")
        _write_array(fh, scene.bank.quats, "<f4")
        _write_array(fh, scene.bank.trans, "<f4")
    finally:
        if own:
            fh.close()


def load_scene(path_or_fh) -> GaussianScene:
    own = isinstance(path_or_fh, (str, bytes)) or hasattr(path_or_fh, "__fspath__")
    fh = open(path_or_fh, "rb") if own else path_or_fh
    try:
        magic = fh.read(4)
        if magic != SCENE_MAGIC:
            raise SchemaVersionMismatch(f"bad magic {magic!r}")
        head = fh.read(struct.calcsize("<IQII"))
        if len(head) != struct.calcsize("<IQII"):
            raise DataError("scene file truncated in header")
        version, n, b, f = struct.unpack("<IQII", head)
        if version != SCENE_VERSION:
            raise SchemaVersionMismatch(f"scene version {version}, expected {SCENE_VERSION}")
        background = _read_array(fh, (3,), "<f4")
        positions = _read_array(fh, (n, 3), "<f4")
        rotations = _read_array(fh, (n, 4), "<f4")
        log_scales = _read_array(fh, (n, 3), "<f4")
        logit_opacities = _read_array(fh, (n,), "<f4")
        colors = _read_array(fh, (n, 3), "<f4")
        kinds = _read_array(fh, (n,), "u1")
        motion_logits = _read_array(fh, (n, b), "<f4")
        basis_quats = _read_array(fh, (b, f, 4), "<f4")
        basis_trans = _read_array(fh, (b, f, 3), "<f4")
    finally:
        if own:
            fh.close()
    return GaussianScene(
        positions=positions, rotations=rotations, log_scales=log_scales,
        logit_opacities=logit_opacities, colors=colors, kinds=kinds,
        motion_logits=motion_logits,
        bank=MotionBasisBank(basis_quats, basis_trans),
        background=background, n_frames=f,
    )


def scene_hash(scene: GaussianScene) -> str:
    """sha256 hex digest of the serialized container."""
    buf = io.BytesIO()
    save_scene(scene, buf)
    return hashlib.sha256(buf.getvalue()).hexdigest()


def quantize_scene(scene: GaussianScene) -> GaussianScene:
    """Round every float field to f32 grid (what a save/load round trip keeps)."""
    out = scene.copy()
    for name in ("positions", "rotations", "log_scales", "logit_opacities",
                 "colors", "motion_logits"):
        setattr(out, name, getattr(out, name).astype(np.float32).astype(np.float64))
    out.background = out.background.astype(np.float32).astype(np.float64)
    out.bank = MotionBasisBank(
        out.bank.quats.astype(np.float32).astype(np.float64),
        out.bank.trans.astype(np.float32).astype(np.float64))
    return out
