"""Skeleton motion containers, egocentric normalization and per-frame features.

Coordinates are world-space meters with ``y`` up. A person facing ``+z`` has
their left side on ``+x``. Facing angles are radians about ``+y`` measured
from ``+z`` toward ``+x`` and wrapped to ``[-pi, pi)``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

# SMPL-style 22 joint layout.
JOINT_NAMES = (
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "spine3", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder",
    "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
)
PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19)
NUM_JOINTS = 22
PELVIS, L_HIP, R_HIP, L_SHOULDER, R_SHOULDER = 0, 1, 2, 16, 17
L_WRIST, R_WRIST = 20, 21
# heel (ankle) and toe (foot) joints, left then right
FOOT_JOINTS = (7, 10, 8, 11)

CONTACT_SPEED = 0.05  # m/frame
DEFAULT_FPS = 30


class MotionError(ValueError):
    pass


def wrap_angle(r):
    """Wrap radians to [-pi, pi)."""
    return (np.asarray(r) + np.pi) % (2 * np.pi) - np.pi


@dataclass(frozen=True)
class SpaceState:
    x: float
    z: float
    r: float

    def __post_init__(self):
        vals = (self.x, self.z, self.r)
        if not all(np.isfinite(v) for v in vals):
            raise MotionError(f"non-finite space state {vals}")
        if not -np.pi <= self.r < np.pi:
            object.__setattr__(self, "r", float(wrap_angle(self.r)))

    def as_tuple(self):
        return (self.x, self.z, self.r)


@dataclass(frozen=True, eq=False)
class MotionSequence:
    frames: np.ndarray  # (N_f, J, 3)
    fps: int = DEFAULT_FPS

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 3 or frames.shape[-1] != 3:
            raise MotionError(f"frames must be (N_f, J, 3), got {frames.shape}")
        if frames.shape[0] < 1:
            raise MotionError("motion needs at least one frame")
        if not np.all(np.isfinite(frames)):
            raise MotionError("non-finite joint coordinates")
        if self.fps < 1:
            raise MotionError(f"fps must be >= 1, got {self.fps}")
        frames.setflags(write=False)
        object.__setattr__(self, "frames", frames)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_joints(self) -> int:
        return self.frames.shape[1]

    def __len__(self):
        return self.num_frames

    def __eq__(self, other):
        if not isinstance(other, MotionSequence):
            return NotImplemented
        return self.fps == other.fps and np.array_equal(self.frames, other.frames)

    def slice(self, start: int, stop: int) -> "MotionSequence":
        return MotionSequence(self.frames[start:stop], self.fps)


@dataclass(frozen=True)
class FeatureLayout:
    num_joints: int = NUM_JOINTS

    @property
    def position(self):
        return slice(0, 3 * self.num_joints)

    @property
    def velocity(self):
        return slice(3 * self.num_joints, 6 * self.num_joints)

    @property
    def rotation(self):
        j = self.num_joints
        return slice(6 * j, 6 * j + 6 * (j - 1))

    @property
    def contact(self):
        end = self.rotation.stop
        return slice(end, end + 4)

    @property
    def dim(self) -> int:
        return self.contact.stop


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    features: np.ndarray  # (N_f, D)
    layout: FeatureLayout = field(default_factory=FeatureLayout)
    fps: int = DEFAULT_FPS

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[1] != self.layout.dim:
            raise MotionError(
                f"feature width {self.features.shape} does not match layout dim {self.layout.dim}")

    def positions(self) -> np.ndarray:
        n = self.features.shape[0]
        return self.features[:, self.layout.position].reshape(n, self.layout.num_joints, 3)


def _rot_y(theta):
    """Rotation matrices about +y mapping +z to facing ``theta``."""
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def facing_angle(pose: np.ndarray) -> float:
    """Facing of one (J, 3) pose from the hip and shoulder lateral axes."""
    across = (pose[L_HIP] - pose[R_HIP]) + (pose[L_SHOULDER] - pose[R_SHOULDER])
    # forward = across x up, projected on the ground plane
    fx, fz = -across[2], across[0]
    if np.hypot(fx, fz) < 1e-9:
        raise MotionError("degenerate pose: facing undefined")
    return float(wrap_angle(np.arctan2(fx, fz)))


def space_state_at(seq: MotionSequence, frame: int = 0) -> SpaceState:
    pose = seq.frames[frame]
    return SpaceState(float(pose[PELVIS, 0]), float(pose[PELVIS, 2]), facing_angle(pose))


def normalize_egocentric(seq: MotionSequence) -> tuple[MotionSequence, SpaceState]:
    """Move frame 0's pelvis to the ground origin facing +z.

    Returns the normalized sequence and the removed frame-0 state.
    """
    state = space_state_at(seq, 0)
    shifted = seq.frames - np.array([state.x, 0.0, state.z])
    # row vectors: v' = R(-r) v  ->  v @ R(-r).T
    out = shifted @ _rot_y(-state.r).T
    return MotionSequence(out, seq.fps), state


def denormalize(seq: MotionSequence, state: SpaceState) -> MotionSequence:
    out = seq.frames @ _rot_y(state.r).T + np.array([state.x, 0.0, state.z])
    return MotionSequence(out, seq.fps)


def express_in(seq: MotionSequence, state: SpaceState) -> MotionSequence:
    """Express ``seq`` in the egocentric frame defined by ``state``."""
    shifted = seq.frames - np.array([state.x, 0.0, state.z])
    return MotionSequence(shifted @ _rot_y(-state.r).T, seq.fps)


def _rotation_between(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimal rotations taking unit vectors a[i] onto b[i]; (..., 3, 3)."""
    v = np.cross(a, b)
    c = np.sum(a * b, axis=-1)
    k = np.zeros(a.shape[:-1] + (3, 3))
    k[..., 0, 1], k[..., 0, 2] = -v[..., 2], v[..., 1]
    k[..., 1, 0], k[..., 1, 2] = v[..., 2], -v[..., 0]
    k[..., 2, 0], k[..., 2, 1] = -v[..., 1], v[..., 0]
    eye = np.broadcast_to(np.eye(3), k.shape)
    denom = 1.0 + c
    # antiparallel bones: rotate pi about any axis perpendicular to a
    anti = denom < 1e-8
    scale = np.where(anti, 0.0, 1.0 / np.where(anti, 1.0, denom))[..., None, None]
    rot = eye + k + (k @ k) * scale
    if np.any(anti):
        perp = np.cross(a[anti], np.array([1.0, 0.0, 0.0]))
        small = np.linalg.norm(perp, axis=-1) < 1e-6
        perp[small] = np.cross(a[anti][small], np.array([0.0, 0.0, 1.0]))
        perp /= np.linalg.norm(perp, axis=-1, keepdims=True)
        rot[anti] = 2.0 * perp[..., :, None] * perp[..., None, :] - np.eye(3)
    return rot


def bone_rotations_6d(frames: np.ndarray, rest: np.ndarray,
                      parents=PARENTS) -> np.ndarray:
    """6-D rotation of each non-root bone relative to its rest direction.

    ``frames`` is (N, J, 3); ``rest`` is the (J, 3) reference pose. Returns
    (N, J-1, 6): the first two columns of the minimal rotation matrix.
    """
    idx = np.arange(1, len(parents))
    par = np.array(parents)[1:]
    bones = frames[:, idx] - frames[:, par]
    rest_bones = rest[idx] - rest[par]
    bones = bones / np.maximum(np.linalg.norm(bones, axis=-1, keepdims=True), 1e-9)
    rest_bones = rest_bones / np.maximum(np.linalg.norm(rest_bones, axis=-1, keepdims=True), 1e-9)
    rot = _rotation_between(np.broadcast_to(rest_bones, bones.shape), bones)
    return np.concatenate([rot[..., :, 0], rot[..., :, 1]], axis=-1)


def foot_contacts(frames: np.ndarray, threshold: float = CONTACT_SPEED) -> np.ndarray:
    """Binary heel/toe contact from per-frame joint speed (m/frame)."""
    feet = frames[:, FOOT_JOINTS]
    speed = np.zeros(feet.shape[:2])
    speed[1:] = np.linalg.norm(feet[1:] - feet[:-1], axis=-1)
    return (speed < threshold).astype(np.float64)


def compute_features(seq: MotionSequence, rest_pose: np.ndarray | None = None,
                     contact_threshold: float = CONTACT_SPEED) -> FeatureSequence:
    """Per-frame [positions | velocities | 6-D bone rotations | foot contact].

    ``seq`` is expected to be egocentric already. Velocities are fps-scaled
    first differences of the position block with frame 0 set to zero.
    """
    frames = seq.frames
    n, j, _ = frames.shape
    layout = FeatureLayout(j)
    if rest_pose is None:
        from reactgen.synth import rest_pose as _rest
        rest_pose = _rest()
    vel = np.zeros_like(frames)
    vel[1:] = (frames[1:] - frames[:-1]) * seq.fps
    rot = bone_rotations_6d(frames, rest_pose)
    contact = foot_contacts(frames, contact_threshold)
    feats = np.concatenate(
        [frames.reshape(n, -1), vel.reshape(n, -1), rot.reshape(n, -1), contact], axis=1)
    return FeatureSequence(feats, layout, seq.fps)


def resample_indices(num_frames: int, source_fps: int, target_fps: int) -> np.ndarray:
    stride = source_fps / target_fps
    count = int(np.floor((num_frames - 1) / stride + 1e-9)) + 1
    idx = np.rint(np.arange(count) * stride).astype(int)
    return np.minimum(idx, num_frames - 1)


def resample_fps(seq: MotionSequence, target_fps: int) -> MotionSequence:
    """Nearest-index downsampling by uniform stride."""
    if target_fps < 1:
        raise MotionError("target_fps must be >= 1")
    if target_fps > seq.fps:
        raise MotionError("upsampling unsupported")
    if target_fps == seq.fps:
        return seq
    idx = resample_indices(seq.num_frames, seq.fps, target_fps)
    return MotionSequence(seq.frames[idx], target_fps)


# ---------------------------------------------------------------------------
# on-disk layout
#
# motion file: little-endian header  b"RGMO" | uint32 J | uint32 N_f | uint32 fps
# followed by N_f * J * 3 float32 values, frame-major (frame, joint, xyz).

_MAGIC = b"RGMO"
_HEADER = struct.Struct("<4sIII")


def motion_to_bytes(seq: MotionSequence) -> bytes:
    header = _HEADER.pack(_MAGIC, seq.num_joints, seq.num_frames, seq.fps)
    return header + seq.frames.astype("<f4").tobytes()


def motion_from_bytes(buf: bytes) -> MotionSequence:
    if len(buf) < _HEADER.size:
        raise MotionError("truncated motion header")
    magic, j, n, fps = _HEADER.unpack_from(buf)
    if magic != _MAGIC:
        raise MotionError(f"bad motion magic {magic!r}")
    body = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size)
    if body.size != n * j * 3:
        raise MotionError(f"expected {n * j * 3} floats, found {body.size}")
    return MotionSequence(body.reshape(n, j, 3).astype(np.float64), fps)


def save_motion(path, seq: MotionSequence):
    Path(path).write_bytes(motion_to_bytes(seq))


def load_motion(path) -> MotionSequence:
    return motion_from_bytes(Path(path).read_bytes())


@dataclass(frozen=True, eq=False)
class InteractionSample:
    action: MotionSequence
    reaction: MotionSequence
    action_space: SpaceState
    reaction_space: SpaceState
    label: int
    captions: tuple
    seed: int = 0
    attributes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.action.num_frames != self.reaction.num_frames:
            raise MotionError("action and reaction differ in length")
        if self.action.fps != self.reaction.fps:
            raise MotionError("action and reaction differ in fps")
        if not self.captions:
            raise MotionError("sample needs at least one caption")
        object.__setattr__(self, "captions", tuple(self.captions))

    @property
    def num_frames(self):
        return self.action.num_frames

    def clip(self, start: int, stop: int) -> "InteractionSample":
        action = self.action.slice(start, stop)
        reaction = self.reaction.slice(start, stop)
        return InteractionSample(action, reaction, space_state_at(action), space_state_at(reaction),
                                 self.label, self.captions, self.seed, dict(self.attributes))


def save_sample(directory, sample: InteractionSample):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_motion(d / "action.mot", sample.action)
    save_motion(d / "reaction.mot", sample.reaction)
    meta = {
        "label": sample.label,
        "seed": sample.seed,
        "captions": list(sample.captions),
        "action_space": list(sample.action_space.as_tuple()),
        "reaction_space": list(sample.reaction_space.as_tuple()),
        "attributes": sample.attributes,
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_sample(directory) -> InteractionSample:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    action = load_motion(d / "action.mot")
    reaction = load_motion(d / "reaction.mot")
    return InteractionSample(
        action, reaction,
        SpaceState(*meta["action_space"]), SpaceState(*meta["reaction_space"]),
        int(meta["label"]), tuple(meta["captions"]), int(meta["seed"]),
        meta.get("attributes", {}))


def load_split(directory) -> list[InteractionSample]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(d)
    return [load_sample(p) for p in sorted(d.iterdir()) if (p / "meta.json").exists()]
