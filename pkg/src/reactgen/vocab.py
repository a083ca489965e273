"""One id space for text pieces, pose codes, space bins and control tokens."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from tokenizers import Tokenizer, decoders, models, normalizers, pre_tokenizers

from reactgen.space import SpaceTokens

PAD, EOS, BOS, UNK, MASK = "<pad>", "</s>", "<s>", "<unk>", "<mask>"
MOTION_OPEN, MOTION_CLOSE = "<motion>", "</motion>"
ACTION, REACTION = "Action:", "Reaction:"
CONTROLS = (PAD, EOS, BOS, UNK, MASK, MOTION_OPEN, MOTION_CLOSE, ACTION, REACTION)
FAMILIES = ("control", "text", "pose", "space")
_MOTION_RE = re.compile(r"^<([pxzr])_(\d+)>$")


class MalformedMotion(ValueError):
    pass


@dataclass(frozen=True)
class MixedSequence:
    ids: tuple
    families: tuple

    def __len__(self):
        return len(self.ids)


@dataclass(frozen=True)
class MotionSpan:
    space: SpaceTokens
    pose: tuple
    trailing: tuple = ()   # ids between the pose run and the span end that were not poses
    end: int = 0           # index one past the span in the parsed id list


class Vocabulary:
    def __init__(self, surfaces, families):
        if len(surfaces) != len(families):
            raise ValueError("surface and family tables differ in length")
        if len(set(surfaces)) != len(surfaces):
            raise ValueError("duplicate surface forms")
        bad = set(families) - set(FAMILIES)
        if bad:
            raise ValueError(f"unknown token families {bad}")
        self.surfaces = tuple(surfaces)
        self.families = tuple(families)
        self.index = {s: i for i, s in enumerate(self.surfaces)}
        for c in CONTROLS:
            if c not in self.index:
                raise ValueError(f"vocabulary lacks control token {c}")
        self.pad, self.eos, self.bos, self.unk, self.mask = (self.index[c] for c in
                                                             (PAD, EOS, BOS, UNK, MASK))
        self.motion_open, self.motion_close = self.index[MOTION_OPEN], self.index[MOTION_CLOSE]
        self.action, self.reaction = self.index[ACTION], self.index[REACTION]
        self._kind = {}   # id -> ('p'|'x'|'z'|'r', n)
        for i, (s, f) in enumerate(zip(self.surfaces, self.families)):
            if f in ("pose", "space"):
                m = _MOTION_RE.match(s)
                self._kind[i] = (m.group(1), int(m.group(2)))
        self.n_pose = sum(1 for k, _ in self._kind.values() if k == "p")
        self.n_bins = sum(1 for k, _ in self._kind.values() if k == "x")
        self._text_tok = self._make_text_tokenizer()

    def __len__(self):
        return len(self.surfaces)

    def __eq__(self, other):
        return (isinstance(other, Vocabulary) and self.surfaces == other.surfaces
                and self.families == other.families)

    def family(self, i: int) -> str:
        return self.families[i]

    def mixed(self, ids) -> MixedSequence:
        ids = tuple(int(i) for i in ids)
        return MixedSequence(ids, tuple(self.families[i] for i in ids))

    def pose_id(self, k: int) -> int:
        return self.index[f"<p_{k}>"]

    def space_id(self, channel: str, k: int) -> int:
        return self.index[f"<{channel}_{k}>"]

    def kind(self, i: int):
        """('p'|'x'|'z'|'r', value) for motion tokens, else None."""
        return self._kind.get(i)

    # -- text ---------------------------------------------------------------

    def _make_text_tokenizer(self):
        table = {s: i for i, (s, f) in enumerate(zip(self.surfaces, self.families)) if f == "text"}
        table[UNK] = self.unk
        tok = Tokenizer(models.WordPiece(table, unk_token=UNK, max_input_chars_per_word=100))
        tok.normalizer = normalizers.BertNormalizer(lowercase=True, strip_accents=True)
        tok.pre_tokenizer = pre_tokenizers.Whitespace()
        tok.decoder = decoders.WordPiece()
        return tok

    def encode_text(self, text: str) -> list[int]:
        return self._text_tok.encode(text, add_special_tokens=False).ids

    def decode_text(self, ids) -> str:
        ids = [i for i in ids if self.families[i] == "text"]
        out = self._text_tok.decode(ids)
        return re.sub(r" ([.,!?])", r"\1", out)

    # -- motion spans ---------------------------------------------------------

    def format_motion(self, space: SpaceTokens, pose, closed: bool = True) -> list[int]:
        pose = list(pose)
        if not pose:
            raise MalformedMotion("empty motion")
        ids = [self.motion_open, self.space_id("x", space.x), self.space_id("z", space.z),
               self.space_id("r", space.r)]
        ids += [self.pose_id(int(p)) for p in pose]
        if closed:
            ids.append(self.motion_close)
        return ids

    def parse_motion(self, ids, start: int = 0) -> MotionSpan:
        """First motion span at or after ``start``.

        A leading ``<motion>`` is optional so bare "x z r p..." runs parse too.
        """
        ids = [int(i) for i in ids]
        n = len(ids)
        i = start
        skip = {self.bos, self.action, self.reaction}
        while i < n and ids[i] in skip:
            i += 1
        if i < n and ids[i] == self.motion_open:
            i += 1
        space = []
        for ch in "xzr":
            k = self._kind.get(ids[i]) if i < n else None
            if k is None or k[0] != ch:
                raise MalformedMotion("malformed motion span: space prefix missing or out of order")
            space.append(k[1])
            i += 1
        pose = []
        while i < n and self._kind.get(ids[i], ("", 0))[0] == "p":
            pose.append(self._kind[ids[i]][1])
            i += 1
        if not pose:
            raise MalformedMotion("malformed motion span: no pose tokens")
        trailing = []
        while i < n and ids[i] not in (self.motion_close, self.eos):
            trailing.append(ids[i])
            i += 1
        if i < n and ids[i] == self.motion_close:
            i += 1
        return MotionSpan(SpaceTokens(*space), tuple(pose), tuple(trailing), i)

    def parse_spans(self, ids) -> list[MotionSpan]:
        """All closed/open spans introduced by ``<motion>``."""
        ids = [int(i) for i in ids]
        out, i = [], 0
        while True:
            try:
                i = ids.index(self.motion_open, i)
            except ValueError:
                return out
            span = self.parse_motion(ids, i)
            out.append(span)
            i = span.end

    def render(self, ids) -> str:
        """Readable surface string; motion tokens are written without spaces."""
        parts, text_run = [], []
        for i in ids:
            f = self.families[i]
            if f == "text":
                text_run.append(i)
                continue
            if text_run:
                parts.append(" " + self.decode_text(text_run) + " ")
                text_run = []
            s = self.surfaces[i]
            parts.append(f" {s} " if s in (ACTION, REACTION) else s)
        if text_run:
            parts.append(" " + self.decode_text(text_run))
        return re.sub(r"\s+", " ", "".join(parts)).strip()

    # -- persistence ----------------------------------------------------------

    def save(self, path):
        lines = [f"{s}\t{f}" for s, f in zip(self.surfaces, self.families)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        surfaces, families = [], []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line:
                continue
            s, f = line.rsplit("\t", 1)
            surfaces.append(s)
            families.append(f)
        return cls(surfaces, families)


def build_vocabulary(corpus, n_pose: int = 256, n_bins: int = 10,
                     max_text: int = 2000) -> Vocabulary:
    """Word-piece table for ``corpus`` plus the motion token families.

    The table holds every normalized corpus word up to ``max_text`` (most
    frequent first) and all single characters as head and ``##`` pieces, so
    any corpus caption encodes without ``<unk>``. Rust's trainer breaks merge
    ties in hash order, so it is not used; this table is a pure function of
    the corpus.
    """
    corpus = [c for c in corpus if c and c.strip()]
    if not corpus:
        raise ValueError("empty caption corpus")
    norm = normalizers.BertNormalizer(lowercase=True, strip_accents=True)
    pre = pre_tokenizers.Whitespace()
    counts = Counter()
    for c in corpus:
        counts.update(w for w, _ in pre.pre_tokenize_str(norm.normalize_str(c)))
    chars = sorted({ch for w in counts for ch in w})
    words = sorted(counts, key=lambda w: (-counts[w], w))[:max_text]
    pieces = sorted(set(words) | set(chars) | {"##" + ch for ch in chars})
    pieces = [p for p in pieces if p != UNK and p not in CONTROLS]
    surfaces = list(CONTROLS) + pieces
    families = ["control"] * len(CONTROLS) + ["text"] * len(pieces)
    surfaces += [f"<p_{k}>" for k in range(n_pose)]
    families += ["pose"] * n_pose
    for ch in "xzr":
        surfaces += [f"<{ch}_{k}>" for k in range(n_bins)]
        families += ["space"] * n_bins
    return Vocabulary(surfaces, families)
