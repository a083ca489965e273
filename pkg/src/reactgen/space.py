"""Uniform binning of ground-plane position and facing into discrete tokens."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from reactgen.motion import SpaceState

CHANNELS = ("x", "z", "r")
WIDEN_EPS = 1e-6


@dataclass(frozen=True)
class ChannelBins:
    lo: float
    hi: float
    n_bins: int

    def __post_init__(self):
        if not self.hi > self.lo:
            raise ValueError(f"bin range needs hi > lo, got [{self.lo}, {self.hi}]")
        if self.n_bins < 2:
            raise ValueError("need at least two bins")

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / self.n_bins

    def encode(self, v: float) -> int:
        idx = math.floor((v - self.lo) * self.n_bins / (self.hi - self.lo))
        return min(max(idx, 0), self.n_bins - 1)

    def decode(self, idx: int) -> float:
        if not 0 <= idx < self.n_bins:
            raise IndexError(f"bin index {idx} outside [0, {self.n_bins})")
        return self.lo + (idx + 0.5) * (self.hi - self.lo) / self.n_bins


@dataclass(frozen=True)
class SpaceBinConfig:
    x: ChannelBins
    z: ChannelBins
    r: ChannelBins

    @property
    def n_bins(self) -> int:
        return self.x.n_bins

    def channel(self, name) -> ChannelBins:
        return getattr(self, name)

    def to_dict(self):
        return {"version": 1, "channels": [dict(name=c, **asdict(self.channel(c))) for c in CHANNELS]}

    @classmethod
    def from_dict(cls, d):
        chans = {c["name"]: ChannelBins(float(c["lo"]), float(c["hi"]), int(c["n_bins"]))
                 for c in d["channels"]}
        return cls(**chans)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class SpaceTokens:
    x: int
    z: int
    r: int

    def as_tuple(self):
        return (self.x, self.z, self.r)


def fit_bins(states, n_bins: int = 10) -> SpaceBinConfig:
    """Per-channel dataset extremes; a degenerate channel is widened by 1e-6."""
    arr = np.array([[s.x, s.z, s.r] for s in states], dtype=float)
    if arr.size == 0:
        raise ValueError("cannot fit space bins on an empty dataset")
    chans = {}
    for k, name in enumerate(CHANNELS):
        lo, hi = float(arr[:, k].min()), float(arr[:, k].max())
        if hi - lo <= 0.0:
            lo, hi = lo - WIDEN_EPS, hi + WIDEN_EPS
        chans[name] = ChannelBins(lo, hi, n_bins)
    return SpaceBinConfig(**chans)


def encode_space(state: SpaceState, cfg: SpaceBinConfig) -> SpaceTokens:
    return SpaceTokens(cfg.x.encode(state.x), cfg.z.encode(state.z), cfg.r.encode(state.r))


def decode_space(tokens: SpaceTokens, cfg: SpaceBinConfig) -> SpaceState:
    return SpaceState(cfg.x.decode(tokens.x), cfg.z.decode(tokens.z), cfg.r.decode(tokens.r))
