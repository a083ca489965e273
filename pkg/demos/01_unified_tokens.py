"""
From two synthetic people to one token stream
=============================================

Synthesizes a handshake, trains a very small pose tokenizer for a minute, and
prints the action and reaction as the mixed text/motion surface form the
language model reads.

    python3 demos/01_unified_tokens.py
"""

import numpy as np
import torch

from reactgen.synth import CLASS_NAMES, generate_split, synth_generate
from reactgen.tasks import load_templates
from reactgen.vocab import build_vocabulary
from reactgen.vqvae import PoseTokenizerConfig, train_tokenizer

torch.manual_seed(0)

# %% one interaction, both people in world coordinates
s = synth_generate("handshake", seed=7)
print(s.label, s.attributes)
print("captions:", *s.captions, sep="\n  ")
print("action frames", s.action.frames.shape, "frame-0 space state", s.action_space)

# %% a quick tokenizer; the desk layout but few steps, so codes are coarse
train = generate_split(CLASS_NAMES, 6, 0, 120)
val = generate_split(CLASS_NAMES, 1, 1, 120)
tok, hist = train_tokenizer(train, val, PoseTokenizerConfig.desk(), steps=300, eval_every=100,
                            log_fn=lambda r: print("  ", r))
print("best val L1", round(hist["best_val"], 4))

# %% tokens: three space tokens then one pose token per 4 frames
space, pose = tok.tokenize(s.action)
print("space", space.as_tuple(), "pose", len(pose), "tokens:", pose[:12], "...")

corpus = [c for x in train for c in x.captions] + [t for v in load_templates().values() for t in v]
vocab = build_vocabulary(corpus, tok.cfg.num_codes, 10)
ids = vocab.format_motion(space, pose)
print(vocab.render(ids[:10]), "...")

# %% round trip back to joints; frame 0's pelvis lands within half a bin of the original,
# later frames drift with the (briefly trained) pose reconstruction
back = tok.detokenize(space, pose, s.action.fps)
d0 = np.abs(back.frames[0, 0, [0, 2]] - s.action.frames[0, 0, [0, 2]])
half = [tok.bins.channel(c).width / 2 for c in "xz"]
print("frame-0 pelvis error (m):", d0.round(3), "half bin widths:", np.round(half, 3))
drift = np.abs(back.frames[:, 0, [0, 2]] - s.action.frames[: back.num_frames, 0, [0, 2]]).max()
print("worst pelvis drift over the clip (m):", round(float(drift), 3))
