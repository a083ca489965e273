import math
from collections import Counter

import numpy as np
import pytest
from scipy import stats

from reactgen.space import SpaceTokens, encode_space
from reactgen.motion import space_state_at
from reactgen.tasks import (ALL_TASKS, CONTEXT, OPEN, Builder, TaskSampler, TokenizedSample,
                            TrainingSample, build_pretrain_corpus, load_shard, load_templates,
                            mask_targets, n_masked, save_shard)


@pytest.fixture(scope="module")
def builder(vocab, templates):
    return Builder(vocab, templates)


def fake(n=10, reaction_n=None):
    rn = n if reaction_n is None else reaction_n
    track = tuple(SpaceTokens(1, min(k, 9), 2) for k in range(n))
    return TokenizedSample(SpaceTokens(1, 0, 2), tuple(range(n)), SpaceTokens(3, 4, 5),
                           tuple((10 + k) % 16 for k in range(rn)),
                           track, tuple(SpaceTokens(3, 4, 5) for _ in range(rn)),
                           ("a person waves and the other waves back",), 0, "k")


def test_templates_loaded(templates):
    assert all(len(templates[t]) >= 20 for t in ALL_TASKS)


def test_template_count_enforced(tmp_path):
    (tmp_path / "t.txt").write_text("[M2T]\nDescribe.\n")
    with pytest.raises(ValueError):
        load_templates(tmp_path / "t.txt")


def test_motion_text_spans(builder, vocab):
    ts = fake(6)
    kept = dropped = 0
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        s = builder.motion_text(ts, "to_text", rng)
        spans = vocab.parse_spans(s.input)
        assert len(spans) in (1, 2)
        if len(spans) == 2:
            kept += 1
            assert vocab.reaction in s.input
        else:
            dropped += 1
    assert abs(kept / 10_000 - 0.5) < 0.02
    t2m = builder.motion_text(ts, "to_motion", rng)
    spans = vocab.parse_spans(t2m.target)
    assert [sp.space for sp in spans] == [ts.action_space, ts.reaction_space]


def test_pose_space_matches_retokenized_trajectory(builder, vocab, small_split, tokenized,
                                                   tiny_tok):
    rng = np.random.default_rng(0)
    checked = 0
    for sample, ts in zip(small_split, tokenized):
        for who, seq in (("action", sample.action), ("reaction", sample.reaction)):
            n = len(ts.person(who)[1])
            for t in range(n - 1):
                s = builder.pose_space(ts, "pose_to_space", rng, who, t)
                want = encode_space(space_state_at(seq, 4 * (t + 1)), tiny_tok.bins)
                got = vocab.parse_motion(s.target[:3] + [vocab.pose_id(0)]).space
                assert got == want
                checked += 1
    assert checked > 100


def test_pose_space_stationary_and_short(builder, vocab):
    ts = fake(4)
    still = TokenizedSample(ts.action_space, ts.action_pose, ts.reaction_space,
                            ts.reaction_pose, tuple(SpaceTokens(1, 1, 1) for _ in range(4)),
                            ts.reaction_track, ts.captions, 0)
    s = builder.pose_space(still, "pose_to_space", np.random.default_rng(0), "action", 1)
    assert s.target[:3] == s.input[-4:-1]
    s2p = builder.pose_space(ts, "space_to_pose", np.random.default_rng(0), "action", 2)
    assert s2p.target == [vocab.pose_id(2), vocab.eos]
    assert builder.pose_space(fake(1), "pose_to_space", np.random.default_rng(0), "action") is None


def test_motion_motion_partition(builder, vocab):
    ts = fake(10)
    s = builder.motion_motion(ts, "a1_b2", np.random.default_rng(0))
    given = vocab.parse_spans(s.input)
    missing = vocab.parse_spans(s.target)
    assert list(given[0].pose) == list(ts.action_pose[:5])
    assert list(given[1].pose) == list(ts.reaction_pose[5:])
    assert list(missing[0].pose) == list(ts.action_pose[5:])
    assert list(missing[1].pose) == list(ts.reaction_pose[:5])
    two = builder.motion_motion(fake(2), "b1_a2", np.random.default_rng(0))
    assert [len(sp.pose) for sp in vocab.parse_spans(two.input)] == [1, 1]


def test_motion_motion_partition_corpus(builder, vocab, tokenized):
    rng = np.random.default_rng(1)
    for ts in tokenized:
        for variant in ("a1_b2", "b1_a2"):
            s = builder.motion_motion(ts, variant, rng)
            g, m = vocab.parse_spans(s.input), vocab.parse_spans(s.target)
            n = min(len(ts.action_pose), len(ts.reaction_pose))
            assert sorted(g[0].pose + m[0].pose) == sorted(ts.action_pose[:n])
            assert sorted(g[1].pose + m[1].pose) == sorted(ts.reaction_pose[:n])
            assert len(g[0].pose) + len(m[0].pose) == n


def test_thinking(builder, vocab):
    ts = fake(16)
    rng = np.random.default_rng(0)
    for f, k in ((0.25, 4), (0.5, 8), (1.0, 16)):
        s = builder.thinking(ts, f, rng)
        span = vocab.parse_motion(s.input, s.input.index(vocab.action))
        assert list(span.pose) == list(ts.action_pose[:k])
        assert s.caption in ts.captions
        assert vocab.decode_text(s.target) == s.caption


def test_reacting(builder, vocab):
    ts = fake(6)
    rng = np.random.default_rng(0)
    s = builder.reacting(ts, "ground_truth", rng=rng)
    assert s.caption in ts.captions
    tgt = vocab.parse_motion(s.target)
    assert tgt.space == ts.reaction_space
    # action pose j carries tag j; prompt and caption are context
    poses = [i for i, tag in enumerate(s.enc_tags) if tag != CONTEXT]
    assert [s.enc_tags[i] for i in poses] == list(range(6))
    assert s.dec_tags == [0, 0, 0, 0] + list(range(6)) + [5, 5]
    with pytest.raises(ValueError):
        builder.reacting(ts, "model", rng=rng)
    none = builder.reacting(ts, "none", rng=rng)
    assert none.caption is None and len(none.input) < len(s.input) + 1


def test_builders_parse(builder, vocab, tokenized):
    out = build_pretrain_corpus(tokenized, builder, np.random.default_rng(0))
    for task, samples in out.items():
        for s in samples:
            if task in ("M2T", "T2M", "MM"):
                vocab.parse_spans(s.input + s.target)
            assert all(t == CONTEXT for t in s.enc_tags) and all(t == OPEN for t in s.dec_tags)


def test_mask_targets(builder):
    s = builder.motion_text(fake(6), "to_motion", np.random.default_rng(0))
    assert mask_targets(s, 0.0, np.random.default_rng(0)).mask == []
    assert n_masked(20, 0.15) == 3
    base = TrainingSample("MM", [1], list(range(20)), [CONTEXT], [OPEN] * 20)
    rng = np.random.default_rng(5)
    counts = np.zeros(20)
    for _ in range(10_000):
        m = mask_targets(base, 0.15, rng)
        assert len(m.mask) == 3 and len(set(m.mask)) == 3
        counts[m.mask] += 1
    assert stats.chisquare(counts).pvalue > 0.01


def test_task_sampler():
    s = TaskSampler(["A", "B", "C"])
    assert np.allclose(s.probabilities(), 1 / 3)
    s.update({"A": 1.0, "B": 1.0})
    assert np.allclose(s.probabilities(), 1 / 3)
    s.update({"C": 1.0})
    assert np.allclose(s.probabilities(), 1 / 3)
    s.update({"A": 2.0, "B": 1.0, "C": 1.0})
    rng = np.random.default_rng(0)
    c = Counter(s.sample(rng) for _ in range(100_000))
    for k, p in zip("ABC", (0.5, 0.25, 0.25)):
        assert abs(c[k] / 100_000 - p) < 0.02
    s.update({"A": 0.0})
    p = s.probabilities()
    assert p[0] == pytest.approx(0.01) and p.sum() == pytest.approx(1.0)


def test_shard_round_trip(tmp_path, builder):
    samples = [builder.reacting(fake(5), "ground_truth", rng=np.random.default_rng(k))
               for k in range(3)]
    save_shard(tmp_path / "s.jsonl", samples)
    assert load_shard(tmp_path / "s.jsonl") == samples
