"""Procedural two-person interaction generator.

Each class is a kinematic script for an actor and a reactor standing face to
face. Every sample draws four visible attributes (side, speed, size, count)
which the reactor mirrors with a short lag, so the reaction is determined by
the action and the caption describes both.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from reactgen.motion import DEFAULT_FPS, InteractionSample, MotionSequence, space_state_at

CLASS_NAMES = (
    "handshake", "wave", "high_five", "bow", "push", "circle", "point", "retreat",
)
SYMMETRIC = {"handshake", "wave", "high_five", "bow", "circle"}

# limb lengths (m)
PELVIS_HEIGHT = 0.93
THIGH, SHIN = 0.40, 0.40
UPPER_ARM, FOREARM = 0.30, 0.28

# joint offsets of the upper body relative to the pelvis, standing upright
_UPPER = {
    3: (0.0, 0.10, -0.01), 6: (0.0, 0.23, 0.0), 9: (0.0, 0.36, 0.01),
    12: (0.0, 0.55, 0.0), 13: (0.07, 0.47, 0.0), 14: (-0.07, 0.47, 0.0),
    15: (0.0, 0.65, 0.03), 16: (0.17, 0.46, -0.01), 17: (-0.17, 0.46, -0.01),
}
_HANG = np.array([0.05, -0.52, 0.04])  # wrist rest offset from shoulder (left arm)
CHEST_HEIGHT = 1.25
# seconds per gesture phase
QUICK_UNIT, SLOW_UNIT = 0.62, 0.8

SIZE_WORDS = {
    "handshake": ("from nearby", "from far away"),
    "wave": ("low", "high"),
    "high_five": ("at chest height", "above their heads"),
    "bow": ("slightly", "deeply"),
    "push": ("lightly", "hard"),
    "circle": ("closely", "widely"),
    "point": ("slightly", "far"),
    "retreat": ("a short way", "a long way"),
}
COUNT_WORDS = {"circle": ("a quarter turn", "half a turn")}

CAPTION_TEMPLATES = {
    "handshake": (
        "one person walks over {size} and the two shake {side} hands {count} {speed}",
        "a person approaches the other {size} {speed} and they shake {side} hands {count}",
        "someone comes up {size} and shakes the {side} hand of the other {count} {speed}",
    ),
    "wave": (
        "one person waves the {side} hand {size} {count} {speed} and the other waves back",
        "a person {speed} raises the {side} hand {size} and waves {count} and the other person waves back the same way",
        "someone waves {count} with a {size} {side} hand {speed} and the partner returns the wave",
    ),
    "high_five": (
        "two people give each other a {side} handed high five {size} {count} {speed}",
        "one person raises the {side} hand {speed} and the other joins for a high five {size} {count}",
        "the pair high five {count} with {side} hands {size} {speed}",
    ),
    "bow": (
        "one person bows {size} {count} {speed} with the {side} hand on the chest and the other bows back",
        "a person places the {side} hand on the chest and bows {size} {count} {speed} and the other returns the bow",
        "someone bows {size} {speed} {count} holding the {side} hand to the chest and the partner bows in return",
    ),
    "push": (
        "one person pushes the other {size} with the {side} hand {count} {speed} and the other stumbles back",
        "a person {speed} shoves the partner {size} using the {side} hand {count} and the partner staggers backward",
        "someone pushes {count} {size} with the {side} hand {speed} causing the other to stumble",
    ),
    "circle": (
        "the two people circle each other to the {side} {size} for {count} {speed}",
        "two people walk around each other {speed} to the {side} {size} making {count}",
        "the pair {speed} circles to the {side} {size} completing {count}",
    ),
    "point": (
        "one person points {size} to the {side} {count} {speed} and the other turns to look",
        "a person {speed} points the {side} arm {size} to the side {count} and the other looks that way",
        "someone points {count} {size} toward the {side} {speed} and the partner turns to follow the gesture",
    ),
    "retreat": (
        "one person backs away {size} to the {side} {count} {speed} and the other follows",
        "a person {speed} retreats {size} toward the {side} {count} while the other person follows",
        "someone steps back {count} {size} to the {side} {speed} and the partner follows along",
    ),
}


class UnknownClassError(KeyError):
    pass


def class_id(name) -> int:
    if isinstance(name, (int, np.integer)) and not isinstance(name, bool):
        if 0 <= name < len(CLASS_NAMES):
            return int(name)
        raise UnknownClassError(name)
    try:
        return CLASS_NAMES.index(name)
    except ValueError:
        raise UnknownClassError(name) from None


def rest_pose() -> np.ndarray:
    """Standing reference pose, pelvis above the origin, facing +z."""
    pose = np.zeros((22, 3))
    h = PELVIS_HEIGHT
    pose[0] = (0.0, h, 0.0)
    for j, side in ((1, 1.0), (2, -1.0)):
        pose[j] = (0.09 * side, h - 0.07, 0.0)
    for hip, knee, ankle, foot in ((1, 4, 7, 10), (2, 5, 8, 11)):
        pose[knee] = pose[hip] - (0.0, THIGH, 0.0)
        pose[ankle] = pose[knee] - (0.0, SHIN, 0.0)
        pose[foot] = pose[ankle] + (0.0, -0.04, 0.13)
    for j, off in _UPPER.items():
        pose[j] = pose[0] + off
    for sh, el, wr, side in ((16, 18, 20, 1.0), (17, 19, 21, -1.0)):
        hang = _HANG * (side, 1.0, 1.0)
        pose[wr] = pose[sh] + hang
        pose[el] = pose[sh] + hang * UPPER_ARM / (UPPER_ARM + FOREARM) + (0.0, 0.0, -0.02)
    return pose


def smoothstep(t, t0, dur):
    x = np.clip((np.asarray(t, dtype=float) - t0) / max(dur, 1e-9), 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def bump(t, t0, rise, hold, fall):
    return smoothstep(t, t0, rise) - smoothstep(t, t0 + rise + hold, fall)


def _rot_x(pitch):
    """(n, 3, 3) forward bends: +y tilts toward +z for positive pitch."""
    c, s = np.cos(pitch), np.sin(pitch)
    out = np.zeros(np.shape(pitch) + (3, 3))
    out[..., 0, 0] = 1.0
    out[..., 1, 1], out[..., 1, 2] = c, -s
    out[..., 2, 1], out[..., 2, 2] = s, c
    return out


def _rot_y(yaw):
    c, s = np.cos(yaw), np.sin(yaw)
    out = np.zeros(np.shape(yaw) + (3, 3))
    out[..., 0, 0], out[..., 0, 2] = c, s
    out[..., 1, 1] = 1.0
    out[..., 2, 0], out[..., 2, 2] = -s, c
    return out


def _apply(rot, v):
    return np.einsum("...ij,...j->...i", rot, v)


def _solve_arm(shoulder, target, pole):
    """Two-link IK; returns elbow and wrist positions."""
    d_vec = target - shoulder
    dist = np.linalg.norm(d_vec, axis=-1, keepdims=True)
    u = d_vec / np.maximum(dist, 1e-9)
    d = np.clip(dist, 0.05, UPPER_ARM + FOREARM - 1e-4)
    a = (UPPER_ARM ** 2 - FOREARM ** 2 + d ** 2) / (2 * d)
    h = np.sqrt(np.maximum(UPPER_ARM ** 2 - a ** 2, 0.0))
    p = pole - np.sum(pole * u, axis=-1, keepdims=True) * u
    p = p / np.maximum(np.linalg.norm(p, axis=-1, keepdims=True), 1e-9)
    return shoulder + a * u + h * p, shoulder + d * u


@dataclass
class Track:
    """Per-frame controls for one person."""
    root: np.ndarray        # (n, 2) world x, z
    yaw: np.ndarray         # (n,)
    bend: np.ndarray        # (n,) forward pitch
    head_yaw: np.ndarray    # (n,)
    targets: dict           # arm side (+1 left, -1 right) -> (n, 3) body-local target
    weights: dict           # arm side -> (n,) blend toward target

    @classmethod
    def still(cls, n, x, z, yaw):
        return cls(np.tile([x, z], (n, 1)).astype(float), np.full(n, float(yaw)),
                   np.zeros(n), np.zeros(n), {}, {})

    def forward(self):
        return np.stack([np.sin(self.yaw), np.cos(self.yaw)], axis=-1)

    def to_local(self, world_xyz):
        """World points (n, 3) into the unbent body frame."""
        rel = world_xyz - np.stack([self.root[:, 0], np.zeros(len(self.yaw)), self.root[:, 1]], -1)
        return _apply(_rot_y(-self.yaw), rel)

    def reach(self, side, target, weight):
        """Blend an arm toward ``target`` (n, 3); later gestures override earlier ones."""
        target = np.asarray(target, dtype=float) * np.ones((len(self.yaw), 3))
        weight = np.clip(weight, 0.0, 1.0)
        if side in self.targets:
            self.targets[side] = self.targets[side] + weight[:, None] * (target - self.targets[side])
            self.weights[side] = np.maximum(self.weights[side], weight)
        else:
            self.targets[side] = target
            self.weights[side] = weight


def build_frames(track: Track, fps: int) -> np.ndarray:
    """Joint positions (n, 22, 3) from controls."""
    n = len(track.yaw)
    rest = rest_pose()
    local = np.broadcast_to(rest, (n, 22, 3)).copy()

    # gait driven by root travel
    step = np.zeros(n)
    step[1:] = np.linalg.norm(np.diff(track.root, axis=0), axis=-1)
    phase = 2 * np.pi * np.cumsum(step) / 1.1
    kernel = np.ones(9) / 9.0
    speed = np.convolve(np.pad(step * fps, 4, mode="edge"), kernel, mode="valid")
    amp = 0.2 * np.tanh(speed / 0.4)
    h = PELVIS_HEIGHT - 0.03 * amp
    local[:, 0, 1] = h
    for hip, knee, ankle, foot, sgn in ((1, 4, 7, 10, 1.0), (2, 5, 8, 11, -1.0)):
        swing = sgn * amp * np.sin(phase)
        flex = 1.2 * amp * np.clip(np.sin(phase + sgn * np.pi / 2), 0.0, None)
        hip_p = np.stack([np.full(n, rest[hip, 0]), h - 0.07, np.zeros(n)], -1)
        thigh = np.stack([np.zeros(n), -np.cos(swing), np.sin(swing)], -1)
        knee_p = hip_p + THIGH * thigh
        shin = np.stack([np.zeros(n), -np.cos(swing - flex), np.sin(swing - flex)], -1)
        ankle_p = knee_p + SHIN * shin
        local[:, hip], local[:, knee], local[:, ankle] = hip_p, knee_p, ankle_p
        local[:, foot] = ankle_p + (0.0, -0.04, 0.13)

    bend = _rot_x(track.bend)
    pelvis = local[:, 0]
    for j, off in _UPPER.items():
        local[:, j] = pelvis + _apply(bend, np.broadcast_to(off, (n, 3)))
    head_off = local[:, 15] - local[:, 12]
    local[:, 15] = local[:, 12] + _apply(_rot_y(track.head_yaw), head_off)

    for sh, el, wr, side in ((16, 18, 20, 1.0), (17, 19, 21, -1.0)):
        shoulder = local[:, sh]
        rest_target = shoulder + _apply(bend, np.broadcast_to(_HANG * (side, 1.0, 1.0), (n, 3)))
        if side in track.targets:
            w = track.weights[side][:, None]
            target = rest_target + w * (track.targets[side] - rest_target)
        else:
            target = rest_target
        pole = np.broadcast_to(np.array([0.8 * side, -0.4, -0.4]), (n, 3))
        local[:, el], local[:, wr] = _solve_arm(shoulder, target, pole)

    world = np.einsum("nij,nkj->nki", _rot_y(track.yaw), local)
    world[:, :, 0] += track.root[:, 0:1]
    world[:, :, 2] += track.root[:, 1:2]
    return world


# ---------------------------------------------------------------------------
# class scripts


@dataclass
class Scene:
    t: np.ndarray     # seconds
    unit: float       # duration of one gesture phase (s)
    start: float      # actor onset (s)
    lag: float        # reactor delay (s)
    side: float       # +1 left, -1 right
    size: int         # 0 or 1
    count: int        # 1 or 2
    rng: np.random.Generator


def _face_to_face(n, rng, distance):
    x0, z0 = rng.uniform(-0.4, 0.4, size=2)
    yaw0 = rng.uniform(-np.pi / 4, np.pi / 4)
    fwd = np.array([np.sin(yaw0), np.cos(yaw0)])
    bx, bz = np.array([x0, z0]) + distance * fwd
    return Track.still(n, x0, z0, yaw0), Track.still(n, bx, bz, yaw0 + np.pi)


def _shift_root(track, delta_world, weight):
    track.root = track.root + weight[:, None] * np.asarray(delta_world)[None, :]


def _handshake(sc: Scene, n):
    rng = sc.rng
    walk = (0.25, 0.6)[sc.size] + rng.uniform(-0.03, 0.03)
    a, b = _face_to_face(n, rng, 0.8 + walk)
    fwd = a.forward()[0]
    t, u = sc.t, sc.unit
    walk_dur = 1.6 * u
    _shift_root(a, walk * fwd, smoothstep(t, sc.start, walk_dur))
    t_extend = sc.start + 0.5 * walk_dur
    t_meet = t_extend + sc.lag + u
    pump = 0.5 * u
    mid = (a.root[-1] + b.root[-1]) / 2.0
    osc = np.zeros(n)
    for k in range(sc.count):
        osc += 0.06 * bump(t, t_meet + k * pump, pump / 2, 0.0, pump / 2)
    point = np.tile([mid[0], 1.05, mid[1]], (n, 1))
    point[:, 1] -= osc
    a.reach(sc.side, a.to_local(point), bump(t, t_extend, u, sc.lag + sc.count * pump, u))
    b.reach(sc.side, b.to_local(point), bump(t, t_extend + sc.lag, u, sc.count * pump, u))
    return a, b


def _wave(sc: Scene, n):
    a, b = _face_to_face(n, sc.rng, 1.5 + sc.rng.uniform(-0.1, 0.1))
    height = (1.45, 1.75)[sc.size]
    u = sc.unit
    period = 0.7 * u
    for trk, t0 in ((a, sc.start), (b, sc.start + sc.lag)):
        raise_w = bump(sc.t, t0, u, sc.count * period, u)
        osc = np.zeros(n)
        for k in range(sc.count):
            s = t0 + u + k * period
            osc += np.sin(2 * np.pi * np.clip((sc.t - s) / period, 0, 1))
        target = np.stack([sc.side * (0.35 + 0.12 * osc), np.full(n, height), np.full(n, 0.15)], -1)
        trk.reach(sc.side, target, raise_w)
    return a, b


def _high_five(sc: Scene, n):
    a, b = _face_to_face(n, sc.rng, 0.75 + sc.rng.uniform(-0.03, 0.03))
    height = (1.3, 1.72)[sc.size]
    u = sc.unit
    mid = (a.root[0] + b.root[0]) / 2.0
    contact = np.tile([mid[0], height, mid[1]], (n, 1))
    t_strike = sc.start + sc.lag + u
    strike, hold = 0.5 * u, 0.12 * u
    cycle = 2 * strike + hold
    for trk, t0 in ((a, sc.start), (b, sc.start + sc.lag)):
        windup = np.stack([np.full(n, sc.side * 0.25), np.full(n, height), np.full(n, 0.1)], -1)
        up = bump(sc.t, t0, u, t_strike - t0 - u + sc.count * cycle, 0.9 * u)
        trk.reach(sc.side, windup, up)
        hit = np.zeros(n)
        for k in range(sc.count):
            hit += bump(sc.t, t_strike + k * cycle, strike, hold, strike)
        trk.reach(sc.side, trk.to_local(contact), hit)
    return a, b


def _bow(sc: Scene, n):
    a, b = _face_to_face(n, sc.rng, 1.4 + sc.rng.uniform(-0.1, 0.1))
    depth = np.deg2rad((20.0, 45.0)[sc.size])
    u = sc.unit
    each = 1.55 * u
    for trk, t0 in ((a, sc.start), (b, sc.start + sc.lag)):
        pitch = np.zeros(n)
        for k in range(sc.count):
            pitch += depth * bump(sc.t, t0 + 0.4 * u + k * each, 0.7 * u, 0.15 * u, 0.7 * u)
        trk.bend = trk.bend + pitch
        chest = np.stack([np.full(n, sc.side * 0.05), np.full(n, CHEST_HEIGHT - PELVIS_HEIGHT),
                          np.full(n, 0.18)], -1)
        chest = _apply(_rot_x(trk.bend), chest)
        chest[:, 1] += PELVIS_HEIGHT
        trk.reach(sc.side, chest, bump(sc.t, t0, 0.8 * u, sc.count * each - 0.4 * u, 0.8 * u))
    return a, b


def _push(sc: Scene, n):
    a, b = _face_to_face(n, sc.rng, 0.8 + sc.rng.uniform(-0.03, 0.03))
    u = sc.unit
    shove = (0.2, 0.4)[sc.size]
    fwd = a.forward()[0]
    t = sc.t
    each = 2.0 * u
    reach_w = np.zeros(n)
    for k in range(sc.count):
        t0 = sc.start + k * each
        # actor closes the gap left by the previous stumble, then strikes
        _shift_root(a, (shove if k else 0.2) * fwd, smoothstep(t, t0 - 0.2 * u * k, (0.8 + 0.2 * k) * u))
        t_contact = t0 + 0.9 * u
        reach_w += bump(t, t0 + 0.05 * u, 0.85 * u, 0.1 * u, 0.7 * u)
        _shift_root(b, shove * fwd, smoothstep(t, t_contact, 1.2 * u))
        b.bend = b.bend - np.deg2rad(15.0) * bump(t, t_contact, 0.5 * u, 0.1 * u, 0.7 * u)
        flail = bump(t, t_contact, 0.5 * u, 0.2 * u, 0.7 * u)
        for side in (1.0, -1.0):
            b.reach(side, np.tile([side * 0.3, 1.3, 0.3], (n, 1)), 0.6 * flail)
    chest = np.stack([b.root[:, 0] - 0.12 * fwd[0], np.full(n, CHEST_HEIGHT),
                      b.root[:, 1] - 0.12 * fwd[1]], -1)
    local = a.to_local(chest)
    local[:, 0] = sc.side * 0.1
    a.reach(sc.side, local, np.clip(reach_w, 0.0, 1.0))
    return a, b


def _circle(sc: Scene, n):
    radius = (0.45, 0.6)[sc.size] + sc.rng.uniform(-0.03, 0.03)
    a, b = _face_to_face(n, sc.rng, 2 * radius)
    center = (a.root[0] + b.root[0]) / 2.0
    psi_a = np.arctan2(a.root[0, 0] - center[0], a.root[0, 1] - center[1])
    sweep = (np.pi / 2, np.pi)[sc.count - 1] * sc.side
    dur = 2.0 * sc.unit * sc.count
    for trk, t0, psi0 in ((a, sc.start, psi_a), (b, sc.start + sc.lag, psi_a + np.pi)):
        psi = psi0 + sweep * smoothstep(sc.t, t0, dur)
        trk.root = center + radius * np.stack([np.sin(psi), np.cos(psi)], -1)
        trk.yaw = psi + np.pi
    return a, b


def _point(sc: Scene, n):
    a, b = _face_to_face(n, sc.rng, 1.4 + sc.rng.uniform(-0.1, 0.1))
    u = sc.unit
    angle = np.deg2rad((35.0, 80.0)[sc.size])
    each = 2.1 * u
    direction = np.array([sc.side * np.sin(angle), 0.0, np.cos(angle)])
    shoulder = np.array([sc.side * 0.17, 1.39, 0.0])
    target = shoulder + 0.56 * direction + (0.0, 0.05, 0.0)
    w = np.zeros(n)
    turn = np.zeros(n)
    for k in range(sc.count):
        w += bump(sc.t, sc.start + k * each, 0.8 * u, 0.5 * u, 0.8 * u)
        turn += bump(sc.t, sc.start + sc.lag + k * each, 0.8 * u, 0.5 * u, 0.8 * u)
    a.reach(sc.side, np.tile(target, (n, 1)), w)
    # the actor's left is the reactor's right when facing each other
    b.yaw = b.yaw - sc.side * 0.8 * angle * turn
    b.head_yaw = -sc.side * 0.3 * angle * turn
    return a, b


def _retreat(sc: Scene, n):
    a, b = _face_to_face(n, sc.rng, 1.2 + sc.rng.uniform(-0.08, 0.08))
    u = sc.unit
    dist = (0.3, 0.55)[sc.size]
    yaw = a.yaw[0] + np.pi + sc.side * np.deg2rad(25.0)
    delta = dist * np.array([np.sin(yaw), np.cos(yaw)])
    each = 1.7 * u
    for k in range(sc.count):
        t0 = sc.start + k * each
        _shift_root(a, delta, smoothstep(sc.t, t0, 1.4 * u))
        _shift_root(b, delta, smoothstep(sc.t, t0 + sc.lag, 1.4 * u))
    return a, b


_SCRIPTS = {
    "handshake": _handshake, "wave": _wave, "high_five": _high_five, "bow": _bow,
    "push": _push, "circle": _circle, "point": _point, "retreat": _retreat,
}


def caption_slots(name: str, attrs: dict) -> dict:
    side = "left" if attrs["side"] == "left" else "right"
    count = COUNT_WORDS.get(name, ("once", "twice"))[attrs["count"] - 1]
    return {"side": side, "speed": attrs["speed"], "size": SIZE_WORDS[name][attrs["size"]],
            "count": count}


def captions_for(name: str, attrs: dict) -> tuple:
    slots = caption_slots(name, attrs)
    return tuple(tpl.format(**slots) for tpl in CAPTION_TEMPLATES[name])


def draw_attributes(rng: np.random.Generator) -> dict:
    return {
        "side": ("left", "right")[int(rng.integers(2))],
        "speed": ("slowly", "quickly")[int(rng.integers(2))],
        "size": int(rng.integers(2)),
        "count": int(rng.integers(1, 3)),
    }


def synth_generate(class_id, seed: int, n_frames: int = 120, fps: int = DEFAULT_FPS,
                   attributes: dict | None = None) -> InteractionSample:
    """One interaction of the given class; a pure function of its arguments."""
    if isinstance(class_id, str):
        name = class_id
        if name not in _SCRIPTS:
            raise UnknownClassError(name)
        cid = CLASS_NAMES.index(name)
    else:
        cid = int(class_id)
        if not 0 <= cid < len(CLASS_NAMES):
            raise UnknownClassError(class_id)
        name = CLASS_NAMES[cid]
    if n_frames < 2:
        raise ValueError("n_frames must be >= 2")
    rng = np.random.default_rng([int(seed), cid, int(n_frames)])
    attrs = draw_attributes(rng)
    if attributes:
        attrs.update(attributes)
    quick = attrs["speed"] == "quickly"
    sc = Scene(
        t=np.arange(n_frames) / fps,
        unit=QUICK_UNIT if quick else SLOW_UNIT,
        start=rng.uniform(0.1, 0.25),
        lag=rng.uniform(0.3, 0.45),
        side=1.0 if attrs["side"] == "left" else -1.0,
        size=attrs["size"],
        count=attrs["count"],
        rng=rng,
    )
    a_track, b_track = _SCRIPTS[name](sc, n_frames)
    action = MotionSequence(build_frames(a_track, fps), fps)
    reaction = MotionSequence(build_frames(b_track, fps), fps)
    return InteractionSample(action, reaction, space_state_at(action), space_state_at(reaction),
                             cid, captions_for(name, attrs), int(seed), attrs)


def random_clip(sample: InteractionSample, rng: np.random.Generator,
                min_len: int = 16) -> InteractionSample:
    """Crop both persons to one random window of at least ``min_len`` frames."""
    n = sample.num_frames
    if n < min_len:
        raise ValueError(f"sample has {n} frames, fewer than min clip length {min_len}")
    length = int(rng.integers(min_len, n + 1))
    start = int(rng.integers(0, n - length + 1))
    if start == 0 and length == n:
        return sample
    return sample.clip(start, start + length)


def generate_split(classes, samples_per_class: int, seed: int, n_frames: int,
                   fps: int = DEFAULT_FPS) -> list[InteractionSample]:
    """Deterministic corpus; each sample gets its own derived seed."""
    out = []
    for c in classes:
        cid = class_id(c)
        for k in range(samples_per_class):
            s = int(np.random.default_rng([seed, cid, k]).integers(2 ** 31))
            out.append(synth_generate(cid, s, n_frames, fps))
    return out

