import numpy as np
import pytest
from hypothesis import given, strategies as st

from reactgen.space import SpaceTokens
from reactgen.vocab import MalformedMotion, Vocabulary, build_vocabulary


def test_render_example(vocab):
    ids = vocab.format_motion(SpaceTokens(0, 1, 2), [2, 7])
    assert vocab.render(ids) == "<motion><x_0><z_1><r_2><p_2><p_7></motion>"


def test_empty_motion(vocab):
    with pytest.raises(MalformedMotion, match="empty motion"):
        vocab.format_motion(SpaceTokens(0, 0, 0), [])


@given(x=st.integers(0, 9), z=st.integers(0, 9), r=st.integers(0, 9),
       pose=st.lists(st.integers(0, 15), min_size=1, max_size=40), closed=st.booleans())
def test_format_parse_round_trip(vocab, x, z, r, pose, closed):
    span = vocab.parse_motion(vocab.format_motion(SpaceTokens(x, z, r), pose, closed))
    assert span.space == SpaceTokens(x, z, r) and list(span.pose) == pose
    assert span.trailing == ()


def test_parse_examples(vocab):
    v = vocab
    ids = [v.space_id("x", 0), v.space_id("z", 1), v.space_id("r", 2), v.pose_id(5)]
    span = v.parse_motion(ids)
    assert span.space.as_tuple() == (0, 1, 2) and span.pose == (5,)
    with pytest.raises(MalformedMotion, match="malformed motion span"):
        v.parse_motion([v.pose_id(5), v.space_id("x", 0)])
    with pytest.raises(MalformedMotion, match="malformed motion span"):
        v.parse_motion([v.space_id("z", 0), v.space_id("x", 1), v.space_id("r", 2), v.pose_id(1)])
    # trailing junk inside the span is reported
    junk = v.format_motion(SpaceTokens(1, 1, 1), [3])
    junk.insert(-1, v.encode_text("wave")[0])
    assert len(v.parse_motion(junk).trailing) == 1


def test_parser_fuzz(vocab):
    """A million random streams: every call returns a span or raises MalformedMotion."""
    rng = np.random.default_rng(0)
    motion = [i for i in range(len(vocab)) if vocab.kind(i)]
    pool = np.array(motion + [vocab.motion_open, vocab.motion_close, vocab.eos, vocab.bos,
                              vocab.action, 5, 17])
    streams = pool[rng.integers(len(pool), size=(1_000_000, 7))].tolist()
    ok = bad = 0
    for s in streams:
        try:
            vocab.parse_motion(s)
            ok += 1
        except MalformedMotion:
            bad += 1
    assert ok + bad == 1_000_000 and ok > 0


def test_families_partition(vocab):
    fams = {}
    for i in range(len(vocab)):
        fams.setdefault(vocab.family(i), set()).add(i)
    assert sum(len(s) for s in fams.values()) == len(vocab)
    assert set(fams) <= {"text", "pose", "space", "control"}
    assert len(set(vocab.surfaces)) == len(vocab)


def test_motion_token_count():
    v = build_vocabulary(["a person waves", "two people shake hands"], n_pose=256, n_bins=10)
    assert sum(f in ("pose", "space") for f in v.families) == 256 + 30
    assert v.n_pose == 256 and v.n_bins == 10


def test_caption_coverage_and_determinism(small_split, templates):
    corpus = [c for s in small_split for c in s.captions]
    a = build_vocabulary(corpus, 16, 10)
    b = build_vocabulary(list(corpus), 16, 10)
    assert a == b
    for c in corpus:
        assert a.unk not in a.encode_text(c)


def test_text_round_trip(vocab, small_split):
    cap = small_split[0].captions[0]
    assert vocab.decode_text(vocab.encode_text(cap)).lower() == cap.lower()


def test_save_load(tmp_path, vocab):
    vocab.save(tmp_path / "vocab.txt")
    back = Vocabulary.load(tmp_path / "vocab.txt")
    assert back == vocab
    assert back.index == vocab.index


def test_mixed(vocab):
    ids = [vocab.bos] + vocab.format_motion(SpaceTokens(0, 0, 0), [1])
    m = vocab.mixed(ids)
    assert m.families[0] == "control" and m.families[2] == "space" and m.families[-2] == "pose"
