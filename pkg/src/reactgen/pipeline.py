"""File-mediated pipeline stages shared by the command line and the demos.

Every stage reads its inputs from the workspace and writes its outputs back, so
stages can be re-run independently. Metric reports contain no timings; latency
numbers go to separate ``timing_*.json`` files.
"""

from __future__ import annotations

import copy
import json
import logging
import os
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch
import yaml

from reactgen import evaluation as ev
from reactgen.lm import (ModelConfig, Seq2Seq, TeacherForcingSchedule, TrainConfig, finetune,
                         load_checkpoint, pretrain, save_checkpoint)
from reactgen.motion import load_split, save_sample
from reactgen.runtime import RethinkPolicy, generate_reactions, sweep_rethink
from reactgen.synth import CLASS_NAMES, generate_split
from reactgen.tasks import (PRETRAIN_TASKS, Builder, build_pretrain_corpus, load_shard,
                            load_templates, load_tokenized, save_shard, save_tokenized,
                            tokenize_corpus)
from reactgen.vocab import Vocabulary, build_vocabulary
from reactgen.vqvae import MotionTokenizer, PoseTokenizerConfig, codebook_usage, train_tokenizer

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
HOME_ENV = "REACTGEN_HOME"

DEFAULTS = {
    "version": CONFIG_VERSION,
    "seed": 0,
    "paths": {"data": "data", "checkpoints": "checkpoints", "reports": "reports"},
    "data": {"classes": list(CLASS_NAMES), "train_per_class": 48, "val_per_class": 4,
             "test_per_class": 16, "n_frames": 120, "fps": 30, "clips_per_sample": 2},
    "tokenizer": {"preset": "desk", "steps": 3000, "batch_size": 32, "window": 64,
                  "n_bins": 10, "eval_every": 250, "patience": 20},
    "model": {"preset": "desk", "max_len": 256, "dropout": 0.1},
    "pretrain": {"steps": 3000, "lr": 5e-4, "warmup": 200, "batch_size": 32,
                 "eval_every": 250, "tasks": list(PRETRAIN_TASKS), "mask_ratio": 0.15,
                 "variants": 1},
    "finetune": {"steps": 3000, "lr": 5e-4, "warmup": 200, "batch_size": 32,
                 "eval_every": 250, "patience": 3, "min_delta": 0.5},
    "eval": {"preset": "desk", "steps": 2500, "seeds": 20, "batch": 32, "keep_fps": 1,
             "train_per_class": 128},
    "runtime": {"interval": 4},
    "sweep": {"intervals": [1, 2, 4, 8, 16, 32], "fps": [0, 1, 2, 5, 10, 30],
              "samples": 32, "seeds": 5, "matcher_steps": 400},
}

ABLATIONS = {
    "w/o-think": {"finetune_think": False, "mode": "none"},
    "w/-gt-prompt": {"mode": "gt"},
    "w/o-all-pt": {"tasks": []},
    "w/o-mm-pt": {"tasks": ["M2T", "T2M", "P2S", "S2P"]},
    "w/o-ps-pt": {"tasks": ["M2T", "T2M", "MM"]},
    "w/o-mt-pt": {"tasks": ["P2S", "S2P", "MM"]},
}


class PipelineError(Exception):
    code = "E_PIPELINE"


class MissingArtifact(PipelineError):
    code = "E_MISSING"

    def __init__(self, path, producer):
        super().__init__(f"missing upstream artifact {path} (run `{producer}` first)")


class ConfigError(PipelineError):
    code = "E_CONFIG"


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _set_dotted(cfg, key, value):
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config key {key}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key}")
    node[parts[-1]] = yaml.safe_load(value) if isinstance(value, str) else value


class Workspace:
    """Resolved run configuration plus artifact paths."""

    def __init__(self, config: dict | None = None, home=None, overrides=None):
        cfg = _merge(DEFAULTS, config or {})
        for k, v in (overrides or {}).items():
            _set_dotted(cfg, k, v)
        if cfg.get("version") != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {cfg.get('version')!r}, "
                              f"expected {CONFIG_VERSION}")
        unknown = set(cfg["data"]["classes"]) - set(CLASS_NAMES)
        if unknown:
            raise ConfigError(f"unknown classes {sorted(unknown)}")
        self.cfg = cfg
        self.home = Path(home or os.environ.get(HOME_ENV) or ".").resolve()
        self.seed = int(cfg["seed"])

    @classmethod
    def from_file(cls, path=None, home=None, overrides=None):
        data = {}
        if path:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"config file {path} not found")
            data = yaml.safe_load(p.read_text()) or {}
            if "version" not in data:
                raise ConfigError("config file lacks a version field")
        return cls(data, home, overrides)

    def path(self, kind, *parts) -> Path:
        return self.home / self.cfg["paths"][kind] / Path(*parts)

    def need(self, path: Path, producer: str) -> Path:
        if not path.exists():
            raise MissingArtifact(path.relative_to(self.home) if path.is_relative_to(self.home)
                                  else path, producer)
        return path

    def dump_config(self):
        p = self.path("reports", "config.yaml")
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(yaml.safe_dump(self.cfg, sort_keys=True))


def _seed_everything(seed):
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# stages


def synth_data(ws: Workspace):
    d = ws.cfg["data"]
    classes = d["classes"]
    splits = {"train": (d["train_per_class"], ws.seed), "val": (d["val_per_class"], ws.seed + 1),
              "test": (d["test_per_class"], ws.seed + 2)}
    counts = {}
    for name, (n, seed) in splits.items():
        samples = generate_split(classes, n, seed, d["n_frames"], d["fps"])
        root = ws.path("data", name)
        for i, s in enumerate(samples):
            save_sample(root / f"{i:05d}", s)
        counts[name] = len(samples)
    (ws.path("data", "manifest.json")).write_text(json.dumps(
        {"classes": classes, "counts": counts, "n_frames": d["n_frames"], "fps": d["fps"],
         "seed": ws.seed}, indent=1, sort_keys=True))
    return counts


def load_data(ws: Workspace, split):
    root = ws.need(ws.path("data", split), "synth-data")
    return load_split(root)


def train_tokenizer_stage(ws: Workspace, log_fn=None):
    _seed_everything(ws.seed)
    t = ws.cfg["tokenizer"]
    train, val = load_data(ws, "train"), load_data(ws, "val")
    preset = {"desk": PoseTokenizerConfig.desk, "full": PoseTokenizerConfig,
              "tiny": PoseTokenizerConfig.tiny}[t["preset"]]
    tok, hist = train_tokenizer(train, val, preset(), steps=t["steps"], batch_size=t["batch_size"],
                                window=t["window"], seed=ws.seed, eval_every=t["eval_every"],
                                patience=t["patience"], n_bins=t["n_bins"], log_fn=log_fn)
    ck = ws.path("checkpoints")
    ck.mkdir(parents=True, exist_ok=True)
    tok.save(ck / "tokenizer.pt")
    tok.bins.save(ck / "space_bins.json")

    templates = load_templates()
    corpus = [c for s in train for c in s.captions] + [x for v in templates.values() for x in v]
    vocab = build_vocabulary(corpus, tok.cfg.num_codes, t["n_bins"])
    vocab.save(ck / "vocab.txt")

    rng = np.random.default_rng([ws.seed, 5])
    clips = ws.cfg["data"]["clips_per_sample"]
    save_tokenized(ws.path("data", "tokens", "train.jsonl"), tokenize_corpus(train, tok, rng, clips))
    save_tokenized(ws.path("data", "tokens", "train_full.jsonl"), tokenize_corpus(train, tok))
    save_tokenized(ws.path("data", "tokens", "val.jsonl"), tokenize_corpus(val, tok))
    summary = {"best_val_l1": round(float(hist["best_val"]), 6),
               "usage_train": codebook_usage(tok, train), "usage_val": codebook_usage(tok, val)}
    _write_json(ws.path("reports", "tokenizer.json"), summary)
    return summary


def load_tokenizer(ws):
    return MotionTokenizer.load(ws.need(ws.path("checkpoints", "tokenizer.pt"), "train-tokenizer"))


def load_vocab(ws):
    return Vocabulary.load(ws.need(ws.path("checkpoints", "vocab.txt"), "train-tokenizer"))


def _model_cfg(ws, vocab):
    m = ws.cfg["model"]
    return ModelConfig.preset(m["preset"], len(vocab), max_len=m["max_len"], dropout=m["dropout"])


def _train_cfg(ws, section):
    c = ws.cfg[section]
    return TrainConfig(steps=c["steps"], batch_size=c["batch_size"], lr=c["lr"],
                       warmup=c["warmup"], eval_every=c["eval_every"], seed=ws.seed)


def pretrain_stage(ws: Workspace, tasks=None, name="pretrain", on_eval=None):
    """Build (or reuse) the corpus shards and pre-train; ``tasks=[]`` writes an untrained init."""
    _seed_everything(ws.seed)
    vocab = load_vocab(ws)
    p = ws.cfg["pretrain"]
    tasks = list(p["tasks"] if tasks is None else tasks)
    shard_dir = ws.path("data", "corpus")
    builder = Builder(vocab, load_templates())
    train_items = load_tokenized(ws.need(ws.path("data", "tokens", "train.jsonl"), "train-tokenizer"))
    val_items = load_tokenized(ws.need(ws.path("data", "tokens", "val.jsonl"), "train-tokenizer"))
    for split, items, seed in (("train", train_items, 1), ("val", val_items, 2)):
        if not (shard_dir / split / "M2T.jsonl").exists():
            corpus = build_pretrain_corpus(items, builder, np.random.default_rng([ws.seed, seed]),
                                           PRETRAIN_TASKS, p["variants"], p["mask_ratio"])
            for t, samples in corpus.items():
                save_shard(shard_dir / split / f"{t}.jsonl", samples)
    train = {t: load_shard(shard_dir / "train" / f"{t}.jsonl") for t in tasks}
    val = {t: load_shard(shard_dir / "val" / f"{t}.jsonl") for t in tasks}
    model = Seq2Seq(_model_cfg(ws, vocab))
    result = {"history": [], "best_val": None}
    if tasks:
        result = pretrain(model, vocab, train, val, _train_cfg(ws, "pretrain"),
                          log_path=ws.path("reports", f"{name}_log.jsonl"), on_eval=on_eval)
    save_checkpoint(model, ws.path("checkpoints", f"{name}.pt"), {"tasks": tasks})
    _write_json(ws.path("reports", f"{name}.json"), _rounded(
        {"tasks": tasks, "best_val": result["best_val"],
         "final": result["history"][-1] if result["history"] else None}))
    return result


def finetune_stage(ws: Workspace, think=True, source="pretrain", name=None, on_eval=None):
    _seed_everything(ws.seed)
    name = name or ("finetune" if think else "finetune_nothink")
    vocab = load_vocab(ws)
    model, _ = load_checkpoint(ws.need(ws.path("checkpoints", f"{source}.pt"), "pretrain"))
    builder = Builder(vocab, load_templates())
    train_items = load_tokenized(ws.need(ws.path("data", "tokens", "train.jsonl"), "train-tokenizer"))
    val_items = load_tokenized(ws.path("data", "tokens", "val.jsonl"))
    f = ws.cfg["finetune"]
    sched = TeacherForcingSchedule(f["patience"], f["min_delta"])
    result = finetune(model, vocab, builder, train_items, val_items, _train_cfg(ws, "finetune"),
                      sched, think=think, log_path=ws.path("reports", f"{name}_log.jsonl"),
                      on_eval=on_eval)
    save_checkpoint(model, ws.path("checkpoints", f"{name}.pt"),
                    {"think": think, "source": source, "switched_at": result["switched_at"]})
    _write_json(ws.path("reports", f"{name}.json"), _rounded(
        {k: result[k] for k in ("best_val", "switched_at", "phase", "prompts")}
        | {"history": result["history"]}))
    return result


def matcher_stage(ws: Workspace, keep_fps=None, name="matcher", log_fn=None):
    path = ws.path("checkpoints", f"{name}.pt")
    vocab = load_vocab(ws)
    if path.exists():
        return ev.Matcher.load(path, vocab)
    _seed_everything(ws.seed)
    cfg = _matcher_cfg(ws, keep_fps)
    m = ev.train_matching_model(matcher_train_data(ws), vocab, ws.cfg["data"]["classes"], cfg,
                                ws.seed, log_fn)
    m.save(path)
    return m


def matcher_train_data(ws):
    """The matcher gets its own, larger draw (seed + 3) so it never sees generator training data.

    Falls back to the stored train split when ``eval.train_per_class`` is 0.
    """
    n = ws.cfg["eval"]["train_per_class"]
    if not n:
        return load_data(ws, "train")
    d = ws.cfg["data"]
    return generate_split(d["classes"], n, ws.seed + 3, d["n_frames"], d["fps"])


def _matcher_cfg(ws, keep_fps=None):
    e = ws.cfg["eval"]
    base = {"desk": ev.MatchingModelConfig.desk, "full": ev.MatchingModelConfig,
            "tiny": ev.MatchingModelConfig.tiny}[e["preset"]]
    return base(steps=e["steps"], keep_fps=e["keep_fps"] if keep_fps is None else keep_fps)


def _generator_for(ws, arm):
    """(checkpoint name, runtime mode) for an evaluation arm."""
    return {"full": ("finetune", "think"), "w/-gt-prompt": ("finetune", "gt"),
            "w/o-think": ("finetune_nothink", "none")}.get(arm, (f"finetune_{_slug(arm)}", "think"))


def _slug(arm):
    return arm.replace("/", "").replace("-", "_")


def arm_reactions(ws: Workspace, arm, samples, interval=None):
    """Reactions for an evaluation arm plus per-episode records (cached on disk)."""
    if arm == "real":
        return [s.reaction for s in samples], None
    if arm == "shuffled":
        return ev.shuffled_reactions(samples, ws.seed), None
    ck_name, mode = _generator_for(ws, arm)
    model, _ = load_checkpoint(ws.need(ws.path("checkpoints", f"{ck_name}.pt"),
                                       "finetune" if ck_name == "finetune" else f"ablate {arm}"))
    vocab, tok = load_vocab(ws), load_tokenizer(ws)
    interval = interval or ws.cfg["runtime"]["interval"]
    eps = generate_reactions(model, vocab, Builder(vocab, load_templates()), tok, samples,
                             RethinkPolicy(interval), mode, ws.seed)
    return [e.reaction for e in eps], eps


def evaluate_stage(ws: Workspace, arms=("real", "shuffled", "full"), tag="metrics"):
    """Matching-model metrics for each arm; writes ``{tag}.jsonl``/``.txt`` and ``timing_{tag}.json``."""
    matcher = matcher_stage(ws)
    test = load_data(ws, "test")
    e = ws.cfg["eval"]
    rows, timing, captions = [], {}, []
    for arm in arms:
        torch.manual_seed(ws.seed)
        reactions, eps = arm_reactions(ws, arm, test)
        rep, _ = ev.evaluate_method(matcher, test, reactions, e["seeds"], e["batch"])
        row = {"arm": arm} | {m: {"mean": rep[m][0], "ci95": rep[m][1]} for m in ev.METRICS}
        if eps is not None:
            row["flagged_episodes"] = int(sum(ep.flagged for ep in eps))
            timing[arm] = {"aits_s": float(np.mean([ep.aits for ep in eps]))}
            captions += [{"arm": arm, "sample": i, "captions": ep.captions}
                         for i, ep in enumerate(eps)]
        rows.append(row)
    _write_jsonl(ws.path("reports", f"{tag}.jsonl"), [_rounded(r) for r in rows])
    ws.path("reports", f"{tag}.txt").write_text(format_table(rows))
    _write_jsonl(ws.path("reports", f"{tag}_captions.jsonl"), captions)
    _write_json(ws.path("reports", f"timing_{tag}.json"), timing, timing=True)
    return rows


def caption_report(ws: Workspace, ck_name="finetune"):
    """BLEU/ROUGE of greedy thinking captions (full action) on the test split."""
    from reactgen.lm import think_captions
    from reactgen.tasks import tokenize_corpus
    vocab, tok = load_vocab(ws), load_tokenizer(ws)
    model, _ = load_checkpoint(ws.need(ws.path("checkpoints", f"{ck_name}.pt"), "finetune"))
    test = load_data(ws, "test")
    items = tokenize_corpus(test, tok)
    caps = think_captions(model, vocab, Builder(vocab, load_templates()), items)
    m = ev.caption_metrics(caps, [list(s.captions) for s in test])
    _write_json(ws.path("reports", "captioning.json"), _rounded(m))
    return m


def ablate_stage(ws: Workspace, arm: str):
    """Train what the arm needs, evaluate it next to the full model, write a comparison table."""
    if arm not in ABLATIONS:
        raise ConfigError(f"unknown ablation arm {arm!r}; choose from {sorted(ABLATIONS)}")
    plan = ABLATIONS[arm]
    if "tasks" in plan:
        name = f"pretrain_{_slug(arm)}"
        if not ws.path("checkpoints", f"{name}.pt").exists():
            pretrain_stage(ws, plan["tasks"], name)
        if not ws.path("checkpoints", f"finetune_{_slug(arm)}.pt").exists():
            finetune_stage(ws, True, name, f"finetune_{_slug(arm)}")
    elif plan.get("finetune_think") is False:
        if not ws.path("checkpoints", "finetune_nothink.pt").exists():
            finetune_stage(ws, think=False)
    ws.need(ws.path("checkpoints", "finetune.pt"), "finetune")
    return evaluate_stage(ws, ("full", arm), tag=f"ablation_{_slug(arm)}")


def sweep_stage(ws: Workspace, kind: str):
    s = ws.cfg["sweep"]
    test = load_data(ws, "test")
    subset = test[:: max(1, len(test) // s["samples"])][: s["samples"]]
    if kind == "rethink":
        vocab, tok = load_vocab(ws), load_tokenizer(ws)
        model, _ = load_checkpoint(ws.need(ws.path("checkpoints", "finetune.pt"), "finetune"))
        rows = sweep_rethink(model, vocab, Builder(vocab, load_templates()), tok, matcher_stage(ws),
                             subset, s["intervals"], ws.seed, s["seeds"], ws.cfg["eval"]["batch"])
        metric_rows = [{k: r[k] for k in ("interval", "fid", "fid_hw")} for r in rows]
        _write_jsonl(ws.path("reports", "sweep_rethink.jsonl"), [_rounded(r) for r in metric_rows])
        _write_tsv(ws.path("reports", "sweep_rethink_fid.tsv"), "interval", "fid",
                   [(r["interval"], r["fid"]) for r in rows])
        _write_tsv(ws.path("reports", "timing_sweep_rethink_aits.tsv"), "interval", "aits_s",
                   [(r["interval"], r["aits"]) for r in rows], timing=True)
        return rows
    if kind == "fps":
        vocab = load_vocab(ws)
        rows = ev.fps_sweep(matcher_train_data(ws), test, vocab, ws.cfg["data"]["classes"],
                            s["fps"], replace(_matcher_cfg(ws), steps=s["matcher_steps"]),
                            ws.seed, s["seeds"],
                            batch=ws.cfg["eval"]["batch"])
        _write_jsonl(ws.path("reports", "sweep_fps.jsonl"), [_rounded(r) for r in rows])
        _write_tsv(ws.path("reports", "sweep_fps.tsv"), "fps", "score_gap",
                   [(r["fps"], r["score_gap"]) for r in rows])
        return rows
    raise ConfigError(f"unknown sweep kind {kind!r} (rethink | fps)")


# ---------------------------------------------------------------------------
# report helpers


def _rounded(obj, nd=6):
    if isinstance(obj, float):
        return round(obj, nd)
    if isinstance(obj, dict):
        return {k: _rounded(v, nd) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_rounded(v, nd) for v in obj]
    return obj


def _write_json(path, obj, timing=False):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj if timing else _rounded(obj), indent=1, sort_keys=True) + "\n")


def _write_jsonl(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))


def _write_tsv(path, a, b, rows, timing=False):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = "{}\t{:.6g}\n" if timing else "{}\t{:.6f}\n"
    path.write_text(f"{a}\t{b}\n" + "".join(fmt.format(x, y) for x, y in rows))


def format_table(rows):
    head = ["arm", "Top-1", "Top-2", "Top-3", "FID", "MMDist", "Div.", "Acc."]
    keys = ["top1", "top2", "top3", "fid", "mm_dist", "diversity", "acc"]
    lines = ["  ".join(f"{h:>18}" for h in head)]
    for r in rows:
        cells = [f"{r['arm']:>18}"] + [f"{r[k]['mean']:.3f}±{r[k]['ci95']:.3f}".rjust(18) for k in keys]
        lines.append("  ".join(cells))
    return "\n".join(lines) + "\n"


def read_metrics(ws: Workspace, tag="metrics"):
    path = ws.need(ws.path("reports", f"{tag}.jsonl"), "evaluate")
    return {r["arm"]: r for r in map(json.loads, path.read_text().splitlines())}
