"""
Reacting while the other person is still moving
===============================================

Streams one held-out action through a trained workspace token by token, prints
each caption change as it happens, compares re-thinking intervals, and saves
side-view skeleton frames of the result.

    python3 demos/03_streaming.py WORKSPACE [sample_index]

WORKSPACE is any directory produced by 02_small_pipeline.py or by the
``reactgen`` command line chain.
"""

import math
import sys
from pathlib import Path

import numpy as np

from reactgen import pipeline as pl
from reactgen.lm import load_checkpoint
from reactgen.plots import skeleton_frames
from reactgen.runtime import ReactionStream, RethinkPolicy, run_episode
from reactgen.tasks import Builder, load_templates

home = sys.argv[1]
idx = int(sys.argv[2]) if len(sys.argv) > 2 else 0
ws = pl.Workspace.from_file(Path(home, "reports", "config.yaml"), home)
vocab, tok = pl.load_vocab(ws), pl.load_tokenizer(ws)
model, _ = load_checkpoint(ws.path("checkpoints", "finetune.pt"))
builder = Builder(vocab, load_templates())
sample = pl.load_data(ws, "test")[idx]
print("truth:", sample.captions[0])

# %% token by token; a caption line is printed whenever re-thinking changes it
space, pose = tok.tokenize(sample.action)
stream = ReactionStream(model, vocab, builder, RethinkPolicy(4))
for ch, k in zip("xzr", space.as_tuple()):
    stream.on_action_token(vocab.space_id(ch, k))
last = None
for t, p in enumerate(pose, 1):
    out = stream.on_action_token(vocab.pose_id(p))
    if stream.state.caption != last:
        last = stream.state.caption
        print(f"  after {t:2d} action tokens: {last}")
print("reaction tokens:", vocab.render(stream.state.reaction_ids[:8]), "...")
print(f"mean step latency {1e3 * np.mean(stream.state.latencies):.1f} ms")

# %% thinking more often costs time per step
for n_r in (1, 4, 16, math.inf):
    ep = run_episode(model, vocab, builder, tok, sample.action, RethinkPolicy(n_r))
    print(f"  N_r={n_r!s:>4}: {len(ep.captions):2d} thinks, AITS {1e3 * ep.aits:.1f} ms")

# %% pictures
ep = run_episode(model, vocab, builder, tok, sample.action)
out = ws.path("reports", "figures", f"demo_stream_{idx}")
paths = skeleton_frames(sample.action, ep.reaction, out, every=8)
print(len(paths), "frames in", out)
