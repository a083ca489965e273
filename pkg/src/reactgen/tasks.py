"""Training samples for every task family.

Each sample carries two tag lists used for attention masking: a query with tag
``t`` may only see keys whose tag is ``<= t``. Context (prompt, caption, space
prefixes) is tagged ``CONTEXT``; pose ``j`` of a causally visible action is
tagged ``j``. Tasks that are trained without causal restrictions put every
encoder token at ``CONTEXT`` and every decoder token at ``OPEN``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from reactgen.motion import InteractionSample, space_state_at
from reactgen.space import SpaceTokens, encode_space
from reactgen.synth import random_clip
from reactgen.vocab import Vocabulary

PRETRAIN_TASKS = ("M2T", "T2M", "P2S", "S2P", "MM")
FINETUNE_TASKS = ("THINK", "REACT")
ALL_TASKS = PRETRAIN_TASKS + FINETUNE_TASKS
CONTEXT = -1
OPEN = 1_000_000
MIN_TEMPLATES = 20
THINK_FRACTIONS = (0.25, 0.5, 1.0)


def load_templates(path=None) -> dict[str, list[str]]:
    if path is None:
        text = resources.files("reactgen").joinpath("data/templates.txt").read_text()
    else:
        text = Path(path).read_text()
    out, cur = {}, None
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            cur = line[1:-1]
            out[cur] = []
        elif cur is None:
            raise ValueError("template line before any [TASK] header")
        else:
            out[cur].append(line)
    for t in ALL_TASKS:
        if len(out.get(t, ())) < MIN_TEMPLATES:
            raise ValueError(f"task {t} has {len(out.get(t, ()))} templates, need {MIN_TEMPLATES}")
    return out


@dataclass
class TokenizedSample:
    """Motion tokens of one (possibly clipped) interaction plus per-token world states."""
    action_space: SpaceTokens
    action_pose: tuple
    reaction_space: SpaceTokens
    reaction_pose: tuple
    action_track: tuple     # SpaceTokens at frame 4t for each pose step t
    reaction_track: tuple
    captions: tuple
    label: int
    key: str = ""

    def to_dict(self):
        return {
            "key": self.key, "label": self.label, "captions": list(self.captions),
            "action_space": list(self.action_space.as_tuple()), "action_pose": list(self.action_pose),
            "reaction_space": list(self.reaction_space.as_tuple()),
            "reaction_pose": list(self.reaction_pose),
            "action_track": [list(s.as_tuple()) for s in self.action_track],
            "reaction_track": [list(s.as_tuple()) for s in self.reaction_track],
        }

    @classmethod
    def from_dict(cls, d):
        st = lambda v: SpaceTokens(*v)
        return cls(st(d["action_space"]), tuple(d["action_pose"]), st(d["reaction_space"]),
                   tuple(d["reaction_pose"]), tuple(map(st, d["action_track"])),
                   tuple(map(st, d["reaction_track"])), tuple(d["captions"]), d["label"], d["key"])

    def person(self, which):
        if which == "action":
            return self.action_space, self.action_pose, self.action_track
        return self.reaction_space, self.reaction_pose, self.reaction_track


def space_track(seq, n_tokens: int, bins, rate: int = 4) -> tuple:
    """World-space tokens of ``seq`` sampled at the first frame of every pose step."""
    last = seq.num_frames - 1
    return tuple(encode_space(space_state_at(seq, min(rate * t, last)), bins)
                 for t in range(n_tokens))


def tokenize_sample(sample: InteractionSample, tok, key="") -> TokenizedSample:
    a_pose, b_pose = tok.encode_pose([sample.action, sample.reaction])
    rate = tok.cfg.downsample
    a_track = space_track(sample.action, len(a_pose), tok.bins, rate)
    b_track = space_track(sample.reaction, len(b_pose), tok.bins, rate)
    return TokenizedSample(a_track[0], a_pose, b_track[0], b_pose, a_track, b_track,
                           sample.captions, sample.label, key)


def tokenize_corpus(samples, tok, rng=None, clips_per_sample: int = 0, min_clip: int = 16):
    """Full samples plus ``clips_per_sample`` random clips of each, all tokenized."""
    out = []
    for i, s in enumerate(samples):
        out.append(tokenize_sample(s, tok, f"{i}"))
        for c in range(clips_per_sample):
            out.append(tokenize_sample(random_clip(s, rng, min_clip), tok, f"{i}.clip{c}"))
    return out


def save_tokenized(path, items):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for it in items:
            f.write(json.dumps(it.to_dict()) + "\n")


def load_tokenized(path):
    with open(path) as f:
        return [TokenizedSample.from_dict(json.loads(line)) for line in f if line.strip()]


@dataclass
class TrainingSample:
    task: str
    input: list
    target: list
    enc_tags: list
    dec_tags: list
    mask: list = field(default_factory=list)
    caption: str | None = None
    source: str = ""

    def __post_init__(self):
        if not self.input or not self.target:
            raise ValueError(f"{self.task} sample with empty input or target")
        if len(self.enc_tags) != len(self.input) or len(self.dec_tags) != len(self.target):
            raise ValueError("tag lists must align with token lists")

    def to_json(self):
        return json.dumps(asdict(self), separators=(",", ":"))

    @classmethod
    def from_json(cls, line):
        return cls(**json.loads(line))


def save_shard(path, samples):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for s in samples:
            f.write(s.to_json() + "\n")


def load_shard(path):
    with open(path) as f:
        return [TrainingSample.from_json(line) for line in f if line.strip()]


class Builder:
    """Assembles id sequences for one vocabulary and template set."""

    def __init__(self, vocab: Vocabulary, templates=None, p_drop: float = 0.5):
        self.v = vocab
        self.templates = templates or load_templates()
        self.p_drop = p_drop

    def _prompt(self, task, rng):
        pool = self.templates[task]
        return self.v.encode_text(pool[int(rng.integers(len(pool)))])

    def _space(self, s: SpaceTokens):
        v = self.v
        return [v.space_id("x", s.x), v.space_id("z", s.z), v.space_id("r", s.r)]

    def _span(self, role, space, pose, closed=True):
        return [role] + self.v.format_motion(space, pose, closed)

    def _noncausal(self, task, inp, tgt, **kw):
        return TrainingSample(task, inp, tgt, [CONTEXT] * len(inp), [OPEN] * len(tgt), **kw)

    def caption_ids(self, text):
        return self.v.encode_text(text) + [self.v.eos]

    # -- pre-training -----------------------------------------------------------

    def motion_text(self, ts: TokenizedSample, direction, rng) -> TrainingSample:
        v = self.v
        cap = ts.captions[int(rng.integers(len(ts.captions)))]
        a = self._span(v.action, ts.action_space, ts.action_pose)
        b = self._span(v.reaction, ts.reaction_space, ts.reaction_pose)
        if direction == "to_text":
            keep = rng.random() >= self.p_drop
            inp = self._prompt("M2T", rng) + a + (b if keep else [])
            return self._noncausal("M2T", inp, self.caption_ids(cap), caption=cap, source=ts.key)
        if direction == "to_motion":
            inp = self._prompt("T2M", rng) + v.encode_text(cap)
            return self._noncausal("T2M", inp, a + b + [v.eos], caption=cap, source=ts.key)
        raise ValueError(f"unknown direction {direction!r}")

    def pose_space(self, ts: TokenizedSample, direction, rng, who=None, t=None):
        """None when the person has a single pose token."""
        who = who or ("action" if rng.random() < 0.5 else "reaction")
        _, pose, track = ts.person(who)
        if len(pose) < 2:
            return None
        if t is None:
            t = int(rng.integers(len(pose) - 1))
        role = self.v.action if who == "action" else self.v.reaction
        if direction == "pose_to_space":
            inp = self._prompt("P2S", rng) + [role] + self._space(track[t]) + [self.v.pose_id(pose[t])]
            return self._noncausal("P2S", inp, self._space(track[t + 1]) + [self.v.eos],
                                   source=f"{ts.key}:{who}:{t}")
        if direction == "space_to_pose":
            inp = self._prompt("S2P", rng) + [role] + self._space(track[t]) + self._space(track[t + 1])
            return self._noncausal("S2P", inp, [self.v.pose_id(pose[t]), self.v.eos],
                                   source=f"{ts.key}:{who}:{t}")
        raise ValueError(f"unknown direction {direction!r}")

    def motion_motion(self, ts: TokenizedSample, variant, rng) -> TrainingSample:
        v = self.v
        n = min(len(ts.action_pose), len(ts.reaction_pose))
        if n < 2:
            raise ValueError("motion-motion needs at least two pose tokens per person")
        h = n // 2
        a, b = ts.action_pose[:n], ts.reaction_pose[:n]
        sa, sb = ts.action_space, ts.reaction_space
        if variant == "a1_b2":
            given = self._span(v.action, sa, a[:h]) + self._span(v.reaction, sb, b[h:])
            missing = self._span(v.action, sa, a[h:]) + self._span(v.reaction, sb, b[:h])
        elif variant == "b1_a2":
            given = self._span(v.action, sa, a[h:]) + self._span(v.reaction, sb, b[:h])
            missing = self._span(v.action, sa, a[:h]) + self._span(v.reaction, sb, b[h:])
        else:
            raise ValueError(f"unknown variant {variant!r}")
        return self._noncausal("MM", self._prompt("MM", rng) + given, missing + [v.eos],
                               source=f"{ts.key}:{variant}")

    # -- fine-tuning ------------------------------------------------------------

    def thinking_input(self, space, pose, rng=None, template=0):
        """Open action span after the prompt; also used by the streaming runtime."""
        prompt = self._prompt("THINK", rng) if rng is not None else \
            self.v.encode_text(self.templates["THINK"][template])
        return prompt + self._span(self.v.action, space, pose, closed=False)

    def thinking(self, ts: TokenizedSample, fraction, rng) -> TrainingSample:
        if fraction not in THINK_FRACTIONS:
            raise ValueError(f"fraction must be one of {THINK_FRACTIONS}")
        k = max(1, math.ceil(fraction * len(ts.action_pose)))
        cap = ts.captions[int(rng.integers(len(ts.captions)))]
        inp = self.thinking_input(ts.action_space, ts.action_pose[:k], rng)
        return self._noncausal("THINK", inp, self.caption_ids(cap), caption=cap,
                               source=f"{ts.key}:{fraction}")

    def reacting_input(self, caption_ids, space, pose, rng=None, template=0):
        """(ids, tags): prompt and caption first, then the open action span."""
        v = self.v
        prompt = self._prompt("REACT", rng) if rng is not None else \
            v.encode_text(self.templates["REACT"][template])
        ctx = prompt + list(caption_ids) + [v.action, v.motion_open] + self._space(space)
        ids = ctx + [v.pose_id(p) for p in pose]
        return ids, [CONTEXT] * len(ctx) + list(range(len(pose)))

    def reacting_target(self, space, pose):
        v = self.v
        ids = v.format_motion(space, pose, closed=True) + [v.eos]
        n = len(pose)
        return ids, [0, 0, 0, 0] + list(range(n)) + [n - 1, n - 1]

    def reacting(self, ts: TokenizedSample, prompt_source="ground_truth", caption=None,
                 rng=None) -> TrainingSample:
        """Caption-conditioned reaction with causal tags.

        ``prompt_source`` is "ground_truth", "model" (``caption`` must be the
        model's thinking output) or "none" (no caption at all).
        """
        if prompt_source == "ground_truth":
            caption = ts.captions[int(rng.integers(len(ts.captions)))]
        elif prompt_source == "model":
            if caption is None:
                raise ValueError("model prompt source needs a generated caption")
        elif prompt_source == "none":
            caption = None
        else:
            raise ValueError(f"unknown prompt source {prompt_source!r}")
        n = min(len(ts.action_pose), len(ts.reaction_pose))
        cap_ids = self.v.encode_text(caption) if caption else []
        inp, enc_tags = self.reacting_input(cap_ids, ts.action_space, ts.action_pose[:n], rng)
        tgt, dec_tags = self.reacting_target(ts.reaction_space, ts.reaction_pose[:n])
        return TrainingSample("REACT", inp, tgt, enc_tags, dec_tags, caption=caption,
                              source=f"{ts.key}:{prompt_source}")


def n_masked(length: int, ratio: float) -> int:
    return int(math.floor(ratio * length + 0.5))


def mask_targets(sample: TrainingSample, ratio: float, rng) -> TrainingSample:
    """Choose round(ratio * |target|) target positions to hide from the decoder input."""
    k = n_masked(len(sample.target), ratio)
    pos = sorted(int(p) for p in rng.choice(len(sample.target), size=k, replace=False)) if k else []
    d = asdict(sample)
    d["mask"] = pos
    return TrainingSample(**d)


def build_pretrain_corpus(items, builder: Builder, rng, tasks=PRETRAIN_TASKS, variants: int = 1,
                          mask_ratio: float = 0.15) -> dict[str, list[TrainingSample]]:
    out = {t: [] for t in tasks}
    for ts in items:
        for _ in range(variants):
            made = []
            if "M2T" in tasks:
                made.append(builder.motion_text(ts, "to_text", rng))
            if "T2M" in tasks:
                made.append(builder.motion_text(ts, "to_motion", rng))
            if "P2S" in tasks:
                made.append(builder.pose_space(ts, "pose_to_space", rng))
            if "S2P" in tasks:
                made.append(builder.pose_space(ts, "space_to_pose", rng))
            if "MM" in tasks and min(len(ts.action_pose), len(ts.reaction_pose)) >= 2:
                made.append(builder.motion_motion(ts, "a1_b2" if rng.random() < 0.5 else "b1_a2", rng))
            for s in made:
                if s is not None:
                    out[s.task].append(mask_targets(s, mask_ratio, rng))
    return out


def build_thinking_corpus(items, builder: Builder, rng):
    return [builder.thinking(ts, f, rng) for ts in items for f in THINK_FRACTIONS]


class TaskSampler:
    """Draws one task per batch with probability proportional to its validation loss.

    Probabilities are floored at ``floor``; mass above the floor stays proportional.
    """

    def __init__(self, tasks, floor: float = 0.01):
        if floor * len(tasks) >= 1:
            raise ValueError("floor too large for the number of tasks")
        self.tasks = tuple(tasks)
        self.floor = floor
        self.losses: dict[str, float] = {}

    def update(self, losses: dict):
        for t, l in losses.items():
            if t in self.tasks and np.isfinite(l):
                self.losses[t] = max(float(l), 0.0)

    def probabilities(self) -> np.ndarray:
        n = len(self.tasks)
        if any(t not in self.losses for t in self.tasks):
            return np.full(n, 1.0 / n)
        w = np.array([self.losses[t] for t in self.tasks])
        if w.sum() <= 0:
            return np.full(n, 1.0 / n)
        p = w / w.sum()
        fixed = np.zeros(n, bool)
        while True:
            low = (p < self.floor) & ~fixed
            if not low.any():
                return p
            fixed |= low
            if fixed.all():
                return np.full(n, 1.0 / n)
            free = 1.0 - self.floor * fixed.sum()
            rest = np.where(fixed, 0.0, w)
            p = np.where(fixed, self.floor, free * rest / rest.sum() if rest.sum() > 0 else 0.0)

    def sample(self, rng) -> str:
        return self.tasks[int(rng.choice(len(self.tasks), p=self.probabilities()))]

    def state(self):
        return {"losses": dict(self.losses), "probabilities": dict(zip(self.tasks,
                                                                       self.probabilities().tolist()))}
