"""
A whole training run, shrunk
============================

Same stages as the command line (synthesize, tokenize, pre-train, fine-tune,
evaluate) on three classes with short budgets, so it finishes in a few minutes.
The numbers are noisy at this size; the desk preset run is what the reported
results come from.

    python3 demos/02_small_pipeline.py [workspace_dir]

The workspace is kept, so 03_streaming.py can reuse it.
"""

import sys
import tempfile

import torch

from reactgen import pipeline as pl

torch.set_num_threads(1)
home = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="reactgen_demo_")
print("workspace:", home)

cfg = {
    "version": 1,
    "seed": 0,
    "data": {"classes": ["wave", "bow", "push"], "train_per_class": 24, "test_per_class": 12},
    "tokenizer": {"steps": 600},
    "pretrain": {"steps": 400, "eval_every": 100},
    "finetune": {"steps": 600, "eval_every": 100},
    "eval": {"steps": 600, "seeds": 5, "train_per_class": 48, "batch": 12},
}
ws = pl.Workspace(cfg, home)
ws.dump_config()

# %% data and tokens
print(pl.synth_data(ws))
print(pl.train_tokenizer_stage(ws))

# %% language model: multitask pre-training, then thinking + reacting
show = lambda r: print("  ", {k: r[k] for k in r if k in ("step", "val", "phase", "bleu1")})
pl.pretrain_stage(ws, on_eval=show)
ft = pl.finetune_stage(ws, on_eval=show)
print("teacher forcing handed over at step", ft["switched_at"])

# %% matching-model metrics next to real and shuffled reactions
rows = pl.evaluate_stage(ws, ("real", "shuffled", "full", "w/-gt-prompt"))
print(pl.format_table(rows))
print("captions:", pl.caption_report(ws))
