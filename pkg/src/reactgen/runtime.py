"""Online reaction generation with periodic re-thinking."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from reactgen.lm import Seq2Seq, _pick, generate, next_token_logits
from reactgen.motion import MotionSequence
from reactgen.space import SpaceTokens
from reactgen.tasks import Builder


class ProtocolViolation(ValueError):
    pass


@dataclass(frozen=True)
class RethinkPolicy:
    interval: float = 4      # pose tokens between thinks; math.inf thinks once

    def __post_init__(self):
        if not self.interval >= 1:
            raise ValueError("re-think interval must be >= 1")

    def fires(self, t: int) -> bool:
        """Think after the t-th received pose token (1-based)?"""
        if t < 1:
            return False
        if math.isinf(self.interval):
            return t == 1
        return (t - 1) % int(self.interval) == 0

    def count(self, t: int) -> int:
        if t < 1:
            return 0
        return 1 if math.isinf(self.interval) else 1 + (t - 1) // int(self.interval)


@dataclass
class StreamState:
    action_space: list = field(default_factory=list)
    action_pose: list = field(default_factory=list)
    caption: str | None = None
    caption_ids: list = field(default_factory=list)
    reaction_ids: list = field(default_factory=list)   # decoder-side ids emitted so far
    reaction_space: SpaceTokens | None = None
    reaction_pose: list = field(default_factory=list)
    thinks: list = field(default_factory=list)         # (pose index, caption)
    latencies: list = field(default_factory=list)
    flagged: bool = False
    repairs: list = field(default_factory=list)


class ReactionStream:
    """Token-in, tokens-out reactor.

    ``mode`` is "think" (captions from the model), "gt" (a fixed caption, no
    thinking) or "none" (no caption in the reacting prompt).
    """

    def __init__(self, model: Seq2Seq, vocab, builder: Builder, policy=RethinkPolicy(),
                 mode: str = "think", caption: str | None = None, seed: int = 0,
                 max_caption: int = 48):
        if mode not in ("think", "gt", "none"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "gt" and not caption:
            raise ValueError("gt mode needs a caption")
        self.model, self.v, self.builder, self.policy = model, vocab, builder, policy
        self.mode, self.seed, self.max_caption = mode, seed, max_caption
        self.state = StreamState()
        if mode == "gt":
            self._set_caption(caption)
        model.eval()

    # -- helpers ----------------------------------------------------------------

    def _set_caption(self, text):
        self.state.caption = text
        self.state.caption_ids = self.v.encode_text(text) if text else []

    def think(self):
        st = self.state
        inp = self.builder.thinking_input(SpaceTokens(*st.action_space), st.action_pose)
        ids = generate(self.model, [inp], self.v.eos, self.v.bos, self.v.pad, self.max_caption)[0]
        text = self.v.decode_text(ids)
        self._set_caption(text)
        st.thinks.append((len(st.action_pose), text))

    def _expected(self, pos):
        """Predicate for the decoder-side token at target position ``pos``."""
        v = self.v
        if pos == 0:
            return lambda i: i == v.motion_open
        if pos <= 3:
            ch = "xzr"[pos - 1]
            return lambda i: (v.kind(i) or ("",))[0] == ch
        return lambda i: (v.kind(i) or ("",))[0] == "p"

    def _emit(self, pos):
        """Next reaction token at target position ``pos`` with malformed-token recovery."""
        st, v = self.state, self.v
        sp = SpaceTokens(*st.action_space)
        enc, enc_tags = self.builder.reacting_input(st.caption_ids, sp, st.action_pose)
        dec = [v.bos] + st.reaction_ids
        tags = self._dec_tags(len(dec))
        logits, _ = next_token_logits(self.model, enc, enc_tags, dec, tags)
        ok = self._expected(pos)
        tok = int(logits.argmax())
        if ok(tok):
            return tok
        gen = torch.Generator().manual_seed(self.seed * 1_000_003 + len(st.reaction_ids))
        retry = int(_pick(logits[None], 1.0, 0, gen)[0])
        st.flagged = True
        if ok(retry):
            st.repairs.append((pos, "resampled"))
            return retry
        prev = [i for i in st.reaction_ids if ok(i)]
        if prev:
            st.repairs.append((pos, "substituted"))
            return prev[-1]
        allowed = torch.tensor([ok(i) for i in range(len(logits))])
        st.repairs.append((pos, "constrained"))
        return int(logits.masked_fill(~allowed, float("-inf")).argmax())

    def _dec_tags(self, n):
        # decoder position i predicts target i; prefix tokens carry tag 0, pose j carries j
        return [0 if i < 4 else i - 4 for i in range(n)]

    def _append(self, tok):
        self.state.reaction_ids.append(tok)

    # -- protocol ---------------------------------------------------------------

    def on_action_token(self, token: int) -> list[int]:
        st, v = self.state, self.v
        kind = v.kind(int(token))
        if len(st.action_space) < 3:
            want = "xzr"[len(st.action_space)]
            if kind is None or kind[0] != want:
                raise ProtocolViolation("protocol violation: expected space token "
                                        f"<{want}_*> before pose tokens")
            st.action_space.append(kind[1])
            return []
        if kind is None or kind[0] != "p":
            raise ProtocolViolation("protocol violation: expected a pose token")
        t0 = time.perf_counter()
        st.action_pose.append(kind[1])
        t = len(st.action_pose)
        if self.mode == "think" and self.policy.fires(t):
            self.think()
        out = []
        if t == 1:
            for pos in range(4):
                tok = self._emit(pos)
                self._append(tok)
                out.append(tok)
            st.reaction_space = SpaceTokens(*(v.kind(i)[1] for i in st.reaction_ids[1:4]))
        tok = self._emit(4 + len(st.reaction_pose))
        self._append(tok)
        st.reaction_pose.append(v.kind(tok)[1])
        out.append(tok)
        st.latencies.append(time.perf_counter() - t0)
        return out


@dataclass
class EpisodeResult:
    reaction: MotionSequence
    reaction_space: SpaceTokens
    reaction_pose: list
    captions: list        # (pose index, caption)
    aits: float
    latencies: list
    flagged: bool
    repairs: list


def run_episode(model, vocab, builder, tokenizer, action: MotionSequence, policy=RethinkPolicy(),
                mode="think", caption=None, seed=0) -> EpisodeResult:
    """Stream a whole action through the reactor and detokenize the reaction.

    The pose encoder is causal, so tokenizing the full clip yields the same tokens
    a frame-by-frame stream would produce.
    """
    space, pose = tokenizer.tokenize(action)
    stream = ReactionStream(model, vocab, builder, policy, mode, caption, seed)
    for i in (vocab.space_id("x", space.x), vocab.space_id("z", space.z),
              vocab.space_id("r", space.r)):
        stream.on_action_token(i)
    for p in pose:
        stream.on_action_token(vocab.pose_id(p))
    st = stream.state
    motion = tokenizer.detokenize(st.reaction_space, st.reaction_pose, action.fps)
    motion = motion.slice(0, min(motion.num_frames, action.num_frames))
    caps = st.thinks if mode == "think" else [(0, st.caption)]
    return EpisodeResult(motion, st.reaction_space, list(st.reaction_pose), caps,
                         float(np.mean(st.latencies)), list(st.latencies), st.flagged,
                         list(st.repairs))


def generate_reactions(model, vocab, builder, tokenizer, samples, policy=RethinkPolicy(),
                       mode="think", seed=0):
    """One greedy episode per sample; "gt" mode uses each sample's first caption."""
    out = []
    for k, s in enumerate(samples):
        cap = s.captions[0] if mode == "gt" else None
        out.append(run_episode(model, vocab, builder, tokenizer, s.action, policy, mode, cap,
                               seed + k))
    return out


def sweep_rethink(model, vocab, builder, tokenizer, matcher, samples, intervals, seed=0,
                  seeds: int = 5, batch: int = 32):
    """Rows of (interval, FID mean, FID half-width, AITS) over ``samples``."""
    from reactgen.evaluation import evaluate_method

    rows = []
    for n_r in intervals:
        eps = generate_reactions(model, vocab, builder, tokenizer, samples,
                                 RethinkPolicy(n_r), "think", seed)
        rep, _ = evaluate_method(matcher, samples, [e.reaction for e in eps], seeds, batch)
        rows.append({"interval": n_r, "fid": rep["fid"][0], "fid_hw": rep["fid"][1],
                     "aits": float(np.mean([e.aits for e in eps]))})
    return rows
