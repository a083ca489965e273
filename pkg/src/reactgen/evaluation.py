"""Matching model and interaction metrics."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from reactgen.motion import MotionSequence, express_in, resample_indices, space_state_at

log = logging.getLogger(__name__)

FID_JITTER = 1e-6


# ---------------------------------------------------------------------------
# plain metrics


def _moments(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("FID needs at least two feature rows")
    return x.mean(0), np.atleast_2d(np.cov(x, rowvar=False))


def _psd_sqrt(m):
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(mu1, s1, mu2, s2) -> float:
    """||mu1-mu2||^2 + Tr(s1 + s2 - 2 (s1^1/2 s2 s1^1/2)^1/2)."""
    def trace_sqrt(a, b):
        ra = _psd_sqrt(a)
        w = np.linalg.eigvalsh(ra @ b @ ra)
        return np.sqrt(np.clip(w, 0, None)).sum()

    tr = trace_sqrt(s1, s2)
    if not np.isfinite(tr):
        eye = FID_JITTER * np.eye(s1.shape[0])
        s1, s2 = s1 + eye, s2 + eye
        tr = trace_sqrt(s1, s2)
    d = mu1 - mu2
    return float(max(d @ d + np.trace(s1) + np.trace(s2) - 2 * tr, 0.0))


def fid(real, gen) -> float:
    return frechet_distance(*_moments(real), *_moments(gen))


def r_precision(motion, text, batch: int = 32, top_k=(1, 2, 3), seed: int = 0) -> dict:
    """Mean top-k hit rate of the paired caption over shuffled batches.

    Rank = number of captions strictly closer than the true one, so ties favour the pair.
    Trailing rows that do not fill a batch are dropped.
    """
    motion, text = np.asarray(motion, float), np.asarray(text, float)
    n = len(motion)
    if n < batch:
        raise ValueError(f"need at least {batch} rows for R-precision, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    hits = {k: [] for k in top_k}
    for b in range(n // batch):
        idx = perm[b * batch:(b + 1) * batch]
        d = np.linalg.norm(motion[idx, None, :] - text[None, idx, :], axis=-1)
        rank = (d < np.diag(d)[:, None]).sum(1)
        for k in top_k:
            hits[k].append(np.mean(rank < k))
    return {k: float(np.mean(v)) for k, v in hits.items()}


def mm_dist(motion, text) -> float:
    return float(np.linalg.norm(np.asarray(motion, float) - np.asarray(text, float), axis=1).mean())


def diversity(features, pairs="all", seed: int = 0) -> float:
    """Mean Euclidean distance over all unordered pairs, or ``pairs`` random pairs."""
    x = np.asarray(features, float)
    n = len(x)
    if n < 2:
        raise ValueError("diversity needs at least two rows")
    if pairs == "all":
        i, j = np.triu_indices(n, 1)
    else:
        rng = np.random.default_rng(seed)
        i = rng.integers(n, size=int(pairs))
        j = (i + rng.integers(1, n, size=int(pairs))) % n
    return float(np.linalg.norm(x[i] - x[j], axis=1).mean())


def _words(s):
    return s.lower().replace(",", " ").replace(".", " ").split()


def caption_metrics(predictions, references) -> dict:
    """Corpus BLEU-1/BLEU-4 (no smoothing) and mean ROUGE-L F over best reference."""
    from nltk.translate.bleu_score import corpus_bleu
    from rouge_score import rouge_scorer

    if len(predictions) != len(references):
        raise ValueError("predictions and references differ in length")
    references = [[rs] if isinstance(rs, str) else list(rs) for rs in references]
    refs = [[_words(r) for r in rs] for rs in references]
    hyps = [_words(p) for p in predictions]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        b1 = corpus_bleu(refs, hyps, weights=(1.0,))
        b4 = corpus_bleu(refs, hyps, weights=(0.25, 0.25, 0.25, 0.25))
    sc = rouge_scorer.RougeScorer(["rougeL"])
    rl = [sc.score_multi(rs, p)["rougeL"].fmeasure for p, rs in zip(predictions, references)]
    return {"bleu1": float(b1), "bleu4": float(b4), "rougeL": float(np.mean(rl)) if rl else 0.0}


def confidence(values) -> tuple[float, float]:
    """Mean and 95% half-width (1.96 * sample std / sqrt(n))."""
    v = np.asarray(values, float)
    if len(v) < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(1.96 * v.std(ddof=1) / math.sqrt(len(v)))


# ---------------------------------------------------------------------------
# matching model


def downsample_action(a: MotionSequence, keep_fps: float = 1) -> MotionSequence | None:
    """Keep frames at a uniform stride of fps/keep_fps; ``keep_fps=0`` drops the action (None)."""
    if keep_fps == 0:
        return None
    if keep_fps >= a.fps:
        return a
    return MotionSequence(a.frames[resample_indices(a.num_frames, a.fps, keep_fps)], a.fps)


@dataclass
class MatchingModelConfig:
    width: int = 768
    motion_layers: int = 8
    text_layers: int = 8
    heads: int = 8
    ff: int = 0
    keep_fps: float = 1
    reaction_stride: int = 2
    max_frames: int = 512
    max_text: int = 64
    dropout: float = 0.1
    steps: int = 1500
    batch_size: int = 32
    lr: float = 5e-4
    warmup: int = 100
    decay: bool = True      # cosine to zero over ``steps``
    label_weight: float = 1.0

    @classmethod
    def desk(cls, **kw):
        base = dict(width=128, motion_layers=2, text_layers=2, heads=4)
        base.update(kw)
        return cls(**base)

    @classmethod
    def tiny(cls, **kw):
        base = dict(width=16, motion_layers=1, text_layers=1, heads=2, steps=20, batch_size=8)
        base.update(kw)
        return cls(**base)


def _encoder(width, layers, heads, ff, dropout):
    layer = nn.TransformerEncoderLayer(width, heads, ff or 4 * width, dropout, batch_first=True,
                                       norm_first=True, activation="gelu")
    return nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)


class MatchingModel(nn.Module):
    def __init__(self, cfg: MatchingModelConfig, n_joints: int, vocab_size: int, n_classes: int):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.frame_in = nn.Linear(6 * n_joints, w)   # positions and per-step displacement
        self.kind = nn.Embedding(2, w)           # 0 action, 1 reaction
        self.time = nn.Embedding(cfg.max_frames, w)
        self.motion_cls = nn.Parameter(torch.zeros(1, 1, w))
        self.motion_enc = _encoder(w, cfg.motion_layers, cfg.heads, cfg.ff, cfg.dropout)
        self.tok = nn.Embedding(vocab_size, w)
        self.tpos = nn.Embedding(cfg.max_text + 1, w)
        self.text_cls = nn.Parameter(torch.zeros(1, 1, w))
        self.text_enc = _encoder(w, cfg.text_layers, cfg.heads, cfg.ff, cfg.dropout)
        self.motion_proj, self.text_proj = nn.Linear(w, w), nn.Linear(w, w)
        self.classifier = nn.Linear(w, n_classes)
        self.logit_scale = nn.Parameter(torch.tensor(math.log(1 / 0.07)))
        nn.init.normal_(self.motion_cls, std=0.02)
        nn.init.normal_(self.text_cls, std=0.02)

    def embed_motion(self, frames, kinds, times, pad):
        x = self.frame_in(frames) + self.kind(kinds) + self.time(times)
        x = torch.cat([self.motion_cls.expand(len(x), -1, -1), x], 1)
        pad = torch.cat([torch.zeros(len(x), 1, dtype=torch.bool), pad], 1)
        h = self.motion_enc(x, src_key_padding_mask=pad)[:, 0]
        return F.normalize(self.motion_proj(h), dim=-1), h

    def embed_text(self, ids, pad):
        pos = torch.arange(ids.shape[1] + 1)
        x = torch.cat([self.text_cls.expand(len(ids), -1, -1), self.tok(ids)], 1) + self.tpos(pos)
        pad = torch.cat([torch.zeros(len(ids), 1, dtype=torch.bool), pad], 1)
        h = self.text_enc(x, src_key_padding_mask=pad)[:, 0]
        return F.normalize(self.text_proj(h), dim=-1)

    def classify(self, motion_feat):
        return self.classifier(motion_feat)


def _step_diff(x):
    """Displacement to the previous kept frame, zero for the first."""
    d = np.zeros_like(x)
    d[1:] = x[1:] - x[:-1]
    return d


class Matcher:
    """Matching model plus the preprocessing that turns interactions into its inputs."""

    def __init__(self, model: MatchingModel, vocab, class_names):
        self.model, self.vocab, self.class_names = model, vocab, tuple(class_names)

    def label_index(self, samples) -> np.ndarray:
        """Classifier row of each sample (labels are ids into the full class list)."""
        from reactgen.synth import CLASS_NAMES
        return np.array([self.class_names.index(CLASS_NAMES[s.label]) for s in samples])

    @property
    def cfg(self):
        return self.model.cfg

    def motion_tokens(self, action: MotionSequence, reaction: MotionSequence):
        """Per-frame inputs in the actor's frame-0 coordinates."""
        ref = space_state_at(action)
        rows, kinds, times = [], [], []
        a = downsample_action(action, self.cfg.keep_fps)
        if a is not None:
            idx = resample_indices(action.num_frames, action.fps, min(self.cfg.keep_fps, action.fps))
            pos = express_in(a, ref).frames.reshape(len(idx), -1)
            rows.append(np.concatenate([pos, _step_diff(pos)], 1))
            kinds += [0] * len(idx)
            times += list(idx)
        ridx = np.arange(0, reaction.num_frames, self.cfg.reaction_stride)
        pos = express_in(reaction, ref).frames[ridx].reshape(len(ridx), -1)
        rows.append(np.concatenate([pos, _step_diff(pos)], 1))
        kinds += [1] * len(ridx)
        times += list(ridx)
        times = np.minimum(np.asarray(times), self.cfg.max_frames - 1)
        return np.concatenate(rows).astype(np.float32), np.asarray(kinds), times

    def _motion_batch(self, pairs):
        toks = [self.motion_tokens(a, b) for a, b in pairs]
        n = max(len(t[0]) for t in toks)
        D = toks[0][0].shape[1]
        frames = np.zeros((len(toks), n, D), np.float32)
        kinds = np.zeros((len(toks), n), np.int64)
        times = np.zeros((len(toks), n), np.int64)
        pad = np.ones((len(toks), n), bool)
        for i, (f, k, t) in enumerate(toks):
            frames[i, :len(f)], kinds[i, :len(f)], times[i, :len(f)] = f, k, t
            pad[i, :len(f)] = False
        return (torch.from_numpy(frames), torch.from_numpy(kinds), torch.from_numpy(times),
                torch.from_numpy(pad))

    def _text_batch(self, captions):
        ids = [self.vocab.encode_text(c)[:self.cfg.max_text] or [self.vocab.unk] for c in captions]
        n = max(map(len, ids))
        arr = torch.full((len(ids), n), self.vocab.pad, dtype=torch.long)
        pad = torch.ones(len(ids), n, dtype=torch.bool)
        for i, s in enumerate(ids):
            arr[i, :len(s)] = torch.tensor(s)
            pad[i, :len(s)] = False
        return arr, pad

    @torch.no_grad()
    def motion_features(self, pairs, batch_size=64):
        """(unit-norm features, label logits) for (action, reaction) pairs."""
        self.model.eval()
        feats, logits = [], []
        for i in range(0, len(pairs), batch_size):
            f, h = self.model.embed_motion(*self._motion_batch(pairs[i:i + batch_size]))
            feats.append(f)
            logits.append(self.model.classify(f))
        return torch.cat(feats).double().numpy(), torch.cat(logits).double().numpy()

    @torch.no_grad()
    def text_features(self, captions, batch_size=128):
        self.model.eval()
        out = [self.model.embed_text(*self._text_batch(captions[i:i + batch_size]))
               for i in range(0, len(captions), batch_size)]
        return torch.cat(out).double().numpy()

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        torch.save({"format": "reactgen.matcher", "version": 1, "config": asdict(self.cfg),
                    "n_joints": self.model.frame_in.in_features // 6,
                    "vocab_size": self.model.tok.num_embeddings,
                    "classes": list(self.class_names), "state_dict": self.model.state_dict()}, path)

    @classmethod
    def load(cls, path, vocab):
        ck = torch.load(path, map_location="cpu", weights_only=False)
        if ck.get("format") != "reactgen.matcher":
            raise ValueError(f"{path} is not a matching model checkpoint")
        m = MatchingModel(MatchingModelConfig(**ck["config"]), ck["n_joints"], ck["vocab_size"],
                          len(ck["classes"]))
        m.load_state_dict(ck["state_dict"])
        m.eval()
        return cls(m, vocab, ck["classes"])


def train_matching_model(samples, vocab, class_names, cfg: MatchingModelConfig, seed: int = 0,
                         log_fn=None) -> Matcher:
    """Symmetric contrastive loss on (interaction, caption) plus label cross-entropy."""
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    J = samples[0].action.frames.shape[1]
    model = MatchingModel(cfg, J, len(vocab), len(class_names))
    matcher = Matcher(model, vocab, class_names)
    # preprocess once; captions vary per step
    motion = [matcher.motion_tokens(s.action, s.reaction) for s in samples]
    labels = torch.from_numpy(matcher.label_index(samples))
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=0.01)
    first = None
    for step in range(1, cfg.steps + 1):
        model.train()
        lr = cfg.lr * min(1.0, step / max(cfg.warmup, 1))
        if cfg.decay:
            lr *= 0.5 * (1 + math.cos(math.pi * (step - 1) / cfg.steps))
        for g in opt.param_groups:
            g["lr"] = lr
        idx = rng.choice(len(samples), size=min(cfg.batch_size, len(samples)), replace=False)
        n = max(len(motion[i][0]) for i in idx)
        D = motion[0][0].shape[1]
        fr = torch.zeros(len(idx), n, D)
        kd = torch.zeros(len(idx), n, dtype=torch.long)
        tm = torch.zeros(len(idx), n, dtype=torch.long)
        pad = torch.ones(len(idx), n, dtype=torch.bool)
        for r, i in enumerate(idx):
            f, k, t = motion[i]
            fr[r, :len(f)] = torch.from_numpy(f)
            kd[r, :len(f)] = torch.from_numpy(k)
            tm[r, :len(f)] = torch.from_numpy(t)
            pad[r, :len(f)] = False
        caps = [samples[i].captions[int(rng.integers(len(samples[i].captions)))] for i in idx]
        mf, _ = model.embed_motion(fr, kd, tm, pad)
        tf = model.embed_text(*matcher._text_batch(caps))
        scale = model.logit_scale.clamp(max=math.log(100)).exp()
        sim = scale * mf @ tf.t()
        # duplicate captions in a batch are true positives for each other
        same = torch.tensor([[a == b for b in caps] for a in caps], dtype=torch.float32)
        target = same / same.sum(1, keepdim=True)
        l_clip = 0.5 * (torch.sum(-target * F.log_softmax(sim, 1), 1).mean()
                        + torch.sum(-target * F.log_softmax(sim.t(), 1), 1).mean())
        l_cls = F.cross_entropy(model.classify(mf), labels[idx])
        loss = l_clip + cfg.label_weight * l_cls
        if not torch.isfinite(loss) or (first is not None and loss.item() > 10 * first and step > 50):
            raise RuntimeError(f"matching model diverged at step {step}: loss {loss.item()}")
        first = first or loss.item()
        opt.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step()
        if log_fn and step % 250 == 0:
            log_fn({"step": step, "clip": l_clip.item(), "cls": l_cls.item()})
    model.eval()
    return matcher


# ---------------------------------------------------------------------------
# multi-seed evaluation


METRICS = ("top1", "top2", "top3", "fid", "mm_dist", "diversity", "acc")


def choose_captions(samples, seed):
    rng = np.random.default_rng([seed, 7])
    return [s.captions[int(rng.integers(len(s.captions)))] for s in samples]


def metrics_for(matcher: Matcher, samples, feats, logits, real_feats, seed: int, batch: int = 32,
                text_cache=None):
    """One seed's metric values; ``feats``/``logits`` are the matcher outputs for the
    generated reactions paired with the samples' actions."""
    caps = choose_captions(samples, seed)
    if text_cache is not None:
        tf = np.stack([text_cache[c] for c in caps])
    else:
        tf = matcher.text_features(caps)
    rp = r_precision(feats, tf, batch=batch, seed=seed)
    labels = matcher.label_index(samples)
    return {
        "top1": rp[1], "top2": rp[2], "top3": rp[3],
        "fid": fid(real_feats, feats),
        "mm_dist": mm_dist(feats, tf),
        "diversity": diversity(feats),
        "acc": float(np.mean(logits.argmax(1) == labels)),
    }


def evaluate_method(matcher: Matcher, samples, reactions, seeds: int = 20, batch: int = 32):
    """Report {metric: (mean, 95% half-width)} plus per-seed values.

    ``reactions`` are generated once (greedy decoding is deterministic); seeds vary
    the caption draw and the retrieval batching.
    """
    real_feats, _ = matcher.motion_features([(s.action, s.reaction) for s in samples])
    feats, logits = matcher.motion_features([(s.action, r) for s, r in zip(samples, reactions)])
    all_caps = sorted({c for s in samples for c in s.captions})
    text_cache = dict(zip(all_caps, matcher.text_features(all_caps)))
    per_seed = [metrics_for(matcher, samples, feats, logits, real_feats, seed, batch, text_cache)
                for seed in range(seeds)]
    report = {m: confidence([p[m] for p in per_seed]) for m in METRICS}
    return report, per_seed


def derangement(n: int, seed) -> np.ndarray:
    """Random permutation without fixed points (identity when n < 2)."""
    rng = np.random.default_rng(seed)
    if n < 2:
        return np.arange(n)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def shuffled_reactions(samples, seed: int = 0):
    """Each action paired with another sample's reaction."""
    return [samples[j].reaction for j in derangement(len(samples), seed)]


def ranking_score(matcher: Matcher, samples, actions, seed: int = 0, batch: int = 32):
    """Top-1 + Top-2 + Top-3 + Acc for real reactions paired with ``actions``."""
    feats, logits = matcher.motion_features([(a, s.reaction) for a, s in zip(actions, samples)])
    tf = matcher.text_features(choose_captions(samples, seed))
    rp = r_precision(feats, tf, batch=batch, seed=seed)
    acc = float(np.mean(logits.argmax(1) == matcher.label_index(samples)))
    return rp[1] + rp[2] + rp[3] + acc


def fps_sweep(train, test, vocab, class_names, fps_values, cfg: MatchingModelConfig, seed=0,
              seeds: int = 5, log_fn=None, batch: int = 32):
    """Ranking-score gap between true and random actions, one matching model per FPS."""
    rows = []
    for fps in fps_values:
        c = MatchingModelConfig(**{**asdict(cfg), "keep_fps": fps})
        m = train_matching_model(train, vocab, class_names, c, seed)
        gaps = []
        for s in range(seeds):
            rand = [test[j].action for j in derangement(len(test), [s, 11])]
            true = ranking_score(m, test, [t.action for t in test], s, batch)
            gaps.append(true - ranking_score(m, test, rand, s, batch))
        mean, hw = confidence(gaps)
        rows.append({"fps": fps, "score_gap": mean, "half_width": hw})
        if log_fn:
            log_fn(rows[-1])
    return rows

