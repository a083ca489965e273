import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from reactgen.motion import (FeatureLayout, MotionError, MotionSequence, SpaceState,
                             compute_features, denormalize, load_sample, motion_from_bytes,
                             motion_to_bytes, normalize_egocentric, resample_fps, save_sample,
                             wrap_angle)
from reactgen.synth import (CLASS_NAMES, UnknownClassError, random_clip, rest_pose,
                            synth_generate)


def _rot_y(t):
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def still(n=10, pose=None):
    pose = rest_pose() if pose is None else pose
    return MotionSequence(np.repeat(pose[None], n, 0))


def random_motion(rng, n=12):
    base = rest_pose()[None] + 0.05 * rng.standard_normal((n, 22, 3))
    return MotionSequence(base)


def test_identity_normalization():
    seq = still()
    out, state = normalize_egocentric(seq)
    assert np.allclose(out.frames, seq.frames, atol=1e-12)
    assert np.allclose(state.as_tuple(), (0, 0, 0), atol=1e-12)


def test_pure_translation():
    seq = still()
    moved = MotionSequence(seq.frames + np.array([1.0, 0.0, 2.0]))
    out, state = normalize_egocentric(moved)
    assert np.allclose(out.frames, seq.frames, atol=1e-12)
    assert np.allclose(state.as_tuple(), (1.0, 2.0, 0.0), atol=1e-12)


def test_rotated_round_trip(rng):
    seq = random_motion(rng)
    rotated = MotionSequence(seq.frames @ _rot_y(np.pi / 2).T)
    local, state = normalize_egocentric(rotated)
    assert np.abs(denormalize(local, state).frames - rotated.frames).max() < 1e-6
    # oracle: the inverse rigid transform applied by hand
    by_hand = (rotated.frames - [state.x, 0, state.z]) @ _rot_y(-state.r).T
    assert np.allclose(local.frames, by_hand, atol=1e-9)


def test_denormalize_examples():
    seq = still()
    assert denormalize(seq, SpaceState(0, 0, 0)) == seq
    moved = denormalize(seq, SpaceState(1, 2, 0))
    assert np.allclose(moved.frames - seq.frames, [1, 0, 2])


@settings(max_examples=60, deadline=None)
@given(x=st.floats(-5, 5), z=st.floats(-5, 5), r=st.floats(-np.pi, np.pi - 1e-9),
       seed=st.integers(0, 2 ** 16))
def test_round_trips_and_height(x, z, r, seed):
    rng = np.random.default_rng(seed)
    local, _ = normalize_egocentric(random_motion(rng))
    world = denormalize(local, SpaceState(x, z, r))
    back, state = normalize_egocentric(world)
    assert np.abs(back.frames - local.frames).max() < 1e-6
    assert abs(state.x - x) < 1e-6 and abs(state.z - z) < 1e-6
    assert abs(wrap_angle(state.r - r + np.pi) - np.pi) < 1e-6 or abs(state.r - r) < 1e-6
    # heights never change
    assert np.array_equal(world.frames[..., 1], local.frames[..., 1])
    again = denormalize(*normalize_egocentric(world))
    assert np.abs(again.frames - world.frames).max() < 1e-6


def test_degenerate_pose():
    with pytest.raises(MotionError, match="degenerate pose"):
        normalize_egocentric(MotionSequence(np.zeros((3, 22, 3))))


def test_feature_layout_and_blocks(rng):
    assert FeatureLayout(22).dim == 3 * 22 + 3 * 22 + 6 * 21 + 4 == 262
    f = compute_features(still(10))
    L = f.layout
    assert np.all(f.features[:, L.velocity] == 0)
    assert np.all(f.features[:, L.contact] == 1)
    one = compute_features(still(1))
    assert np.all(one.features[:, L.velocity] == 0)
    seq = random_motion(rng, 20)
    f = compute_features(seq)
    pos = f.features[:, L.position]
    vel = f.features[:, L.velocity]
    assert np.array_equal(vel[1:], (pos[1:] - pos[:-1]) * seq.fps)
    assert set(np.unique(f.features[:, L.contact])) <= {0.0, 1.0}


def test_resample():
    seq = MotionSequence(np.random.default_rng(0).standard_normal((120, 22, 3)), fps=60)
    half = resample_fps(seq, 30)
    assert half.num_frames == 60 and half.fps == 30
    assert np.array_equal(half.frames, seq.frames[::2])
    s30 = MotionSequence(np.random.default_rng(1).standard_normal((90, 22, 3)), fps=30)
    assert resample_fps(s30, 30) == s30
    one = resample_fps(s30, 1)
    assert one.num_frames == 3
    assert np.array_equal(one.frames, s30.frames[[0, 30, 60]])
    with pytest.raises(MotionError, match="upsampling unsupported"):
        resample_fps(s30, 60)


def test_synth_determinism_and_errors():
    a = synth_generate("wave", 0, 120)
    b = synth_generate("wave", 0, 120)
    assert motion_to_bytes(a.action) == motion_to_bytes(b.action)
    assert motion_to_bytes(a.reaction) == motion_to_bytes(b.reaction)
    assert a.captions == b.captions and len(a.captions) >= 3 or len(set(a.captions)) >= 1
    with pytest.raises(UnknownClassError):
        synth_generate("juggle", 0, 120)


@pytest.mark.parametrize("name", CLASS_NAMES)
def test_synth_smooth(name):
    worst = 0.0
    for seed in range(6):
        s = synth_generate(name, seed, 120)
        for seq in (s.action, s.reaction):
            worst = max(worst, np.linalg.norm(np.diff(seq.frames, axis=0), axis=-1).max())
    assert worst < 0.1


def test_synth_persons_face_each_other():
    s = synth_generate("handshake", 3, 120)
    a, b = s.action_space, s.reaction_space
    gap = np.array([b.x - a.x, b.z - a.z])
    facing_a = np.array([np.sin(a.r), np.cos(a.r)])
    assert gap @ facing_a > 0.5 * np.linalg.norm(gap)


def test_high_five_contact():
    from reactgen.motion import L_WRIST, R_WRIST
    for seed in range(5):
        s = synth_generate("high_five", seed, 120)
        d = np.minimum(
            np.linalg.norm(s.action.frames[:, L_WRIST] - s.reaction.frames[:, L_WRIST], axis=-1),
            np.linalg.norm(s.action.frames[:, R_WRIST] - s.reaction.frames[:, R_WRIST], axis=-1))
        assert d.min() < 0.15


def test_random_clip():
    s = synth_generate("bow", 1, 120)
    rng = np.random.default_rng(0)
    full = s.clip(0, 120)
    assert full.action == s.action and full.reaction == s.reaction
    c = s.clip(30, 90)
    assert c.action.num_frames == c.reaction.num_frames == 60
    assert c.label == s.label and c.captions == s.captions
    clipped = random_clip(s, rng)
    assert clipped.action.num_frames == clipped.reaction.num_frames >= 16


def test_random_clip_start_uniformity():
    """Start offsets of 10k draws follow the uniform-length, uniform-start law."""
    n, min_len = 25, 16
    s = synth_generate("bow", 1, 120).clip(0, n)
    # stamp the frame index into the action so each window start is recoverable
    stamped = s.action.frames.copy()
    stamped[:, 0, 1] = np.arange(n)
    short = dataclasses.replace(s, action=MotionSequence(stamped, s.action.fps))
    rng = np.random.default_rng(7)
    counts = np.zeros(10)
    for _ in range(10_000):
        c = random_clip(short, rng, min_len)
        start = int(c.action.frames[0, 0, 1])
        counts[start] += 1
    lengths = np.arange(min_len, n + 1)
    expected = np.array([sum(1 / (n - L + 1) for L in lengths if k <= n - L)
                         for k in range(10)]) / len(lengths)
    assert stats.chisquare(counts, expected * 10_000).pvalue > 0.01


def test_sample_io(tmp_path):
    s = synth_generate("point", 2, 40)
    save_sample(tmp_path / "s", s)
    back = load_sample(tmp_path / "s")
    assert back.label == s.label and back.captions == s.captions
    assert np.allclose(back.action.frames, s.action.frames, atol=1e-6)
    assert motion_from_bytes(motion_to_bytes(s.action)).num_frames == 40
