"""Small encoder-decoder transformer over the unified vocabulary, and its training loops."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from reactgen.tasks import OPEN, Builder, TaskSampler, TrainingSample

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
IGNORE = -100


class TrainingDivergence(RuntimeError):
    pass


class ScheduleRegression(RuntimeError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_heads: int = 4
    d_ff: int = 512
    enc_layers: int = 2
    dec_layers: int = 2
    dropout: float = 0.1
    max_len: int = 256

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @classmethod
    def preset(cls, name, vocab_size, **kw):
        table = {
            "desk": dict(d_model=128, n_heads=4, d_ff=512, enc_layers=2, dec_layers=2),
            "full": dict(d_model=768, n_heads=12, d_ff=3072, enc_layers=12, dec_layers=12),
            "tiny": dict(d_model=8, n_heads=2, d_ff=16, enc_layers=1, dec_layers=1, dropout=0.0),
        }
        if name not in table:
            raise ValueError(f"unknown model preset {name!r}")
        return cls(vocab_size=vocab_size, **{**table[name], **kw})


class Attention(nn.Module):
    def __init__(self, d, heads, dropout):
        super().__init__()
        self.h = heads
        self.q = nn.Linear(d, d)
        self.kv = nn.Linear(d, 2 * d)
        self.o = nn.Linear(d, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, ctx, allowed):
        """allowed: (B, Lq, Lk) bool; masked keys get exactly zero weight."""
        B, Lq, d = x.shape
        Lk = ctx.shape[1]
        dh = d // self.h
        q = self.q(x).view(B, Lq, self.h, dh).transpose(1, 2)
        k, v = self.kv(ctx).view(B, Lk, 2, self.h, dh).permute(2, 0, 3, 1, 4)
        s = q @ k.transpose(-1, -2) / math.sqrt(dh)
        s = s.masked_fill(~allowed[:, None], float("-inf"))
        w = self.drop(torch.softmax(s, dim=-1))
        return self.o((w @ v).transpose(1, 2).reshape(B, Lq, d))


class FeedForward(nn.Sequential):
    def __init__(self, d, ff, dropout):
        super().__init__(nn.Linear(d, ff), nn.GELU(), nn.Dropout(dropout), nn.Linear(ff, d))


class EncoderLayer(nn.Module):
    def __init__(self, c: ModelConfig):
        super().__init__()
        self.n1, self.n2 = nn.LayerNorm(c.d_model), nn.LayerNorm(c.d_model)
        self.att = Attention(c.d_model, c.n_heads, c.dropout)
        self.ff = FeedForward(c.d_model, c.d_ff, c.dropout)
        self.drop = nn.Dropout(c.dropout)

    def forward(self, x, allowed):
        h = self.n1(x)
        x = x + self.drop(self.att(h, h, allowed))
        return x + self.drop(self.ff(self.n2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, c: ModelConfig):
        super().__init__()
        self.n1, self.n2, self.n3 = (nn.LayerNorm(c.d_model) for _ in range(3))
        self.self_att = Attention(c.d_model, c.n_heads, c.dropout)
        self.cross_att = Attention(c.d_model, c.n_heads, c.dropout)
        self.ff = FeedForward(c.d_model, c.d_ff, c.dropout)
        self.drop = nn.Dropout(c.dropout)

    def forward(self, y, mem, self_allowed, cross_allowed):
        h = self.n1(y)
        y = y + self.drop(self.self_att(h, h, self_allowed))
        y = y + self.drop(self.cross_att(self.n2(y), mem, cross_allowed))
        return y + self.drop(self.ff(self.n3(y)))


@dataclass
class Batch:
    enc_ids: torch.Tensor
    enc_tags: torch.Tensor
    enc_pad: torch.Tensor
    dec_ids: torch.Tensor
    dec_tags: torch.Tensor
    dec_pad: torch.Tensor
    labels: torch.Tensor


def _pad(seqs, value):
    n = max(len(s) for s in seqs)
    return torch.tensor([list(s) + [value] * (n - len(s)) for s in seqs], dtype=torch.long)


def collate(samples: list[TrainingSample], vocab) -> Batch:
    """Teacher-forced batch: decoder input is bos + target[:-1] with masked positions hidden."""
    dec_in = []
    for s in samples:
        d = [vocab.bos] + list(s.target[:-1])
        for p in s.mask:
            if p + 1 < len(d):
                d[p + 1] = vocab.mask
        dec_in.append(d)
    enc_ids = _pad([s.input for s in samples], vocab.pad)
    enc_pad = _pad([[0] * len(s.input) for s in samples], 1).bool()
    dec_ids = _pad(dec_in, vocab.pad)
    dec_pad = _pad([[0] * len(s.target) for s in samples], 1).bool()
    return Batch(enc_ids, _pad([s.enc_tags for s in samples], OPEN), enc_pad, dec_ids,
                 _pad([s.dec_tags for s in samples], OPEN), dec_pad, _pad([s.target for s in samples], IGNORE))


class Seq2Seq(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.embed = nn.Embedding(cfg.vocab_size, d)
        self.enc_pos = nn.Embedding(cfg.max_len, d)
        self.dec_pos = nn.Embedding(cfg.max_len, d)
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.enc_layers))
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.dec_layers))
        self.enc_norm, self.dec_norm = nn.LayerNorm(d), nn.LayerNorm(d)
        self.drop = nn.Dropout(cfg.dropout)
        nn.init.normal_(self.embed.weight, std=d ** -0.5)
        nn.init.normal_(self.enc_pos.weight, std=0.02)
        nn.init.normal_(self.dec_pos.weight, std=0.02)

    def _check_len(self, L):
        if L > self.cfg.max_len:
            raise ValueError(f"sequence of length {L} exceeds max_len {self.cfg.max_len}")

    def encode(self, ids, tags, pad):
        self._check_len(ids.shape[1])
        pos = torch.arange(ids.shape[1])
        x = self.drop(self.embed(ids) * math.sqrt(self.cfg.d_model) + self.enc_pos(pos))
        allowed = (tags[:, None, :] <= tags[:, :, None]) & ~pad[:, None, :]
        for layer in self.encoder:
            x = layer(x, allowed)
        return self.enc_norm(x)

    def decode(self, mem, enc_tags, enc_pad, dec_ids, dec_tags, dec_pad=None):
        L = dec_ids.shape[1]
        self._check_len(L)
        if dec_pad is None:
            dec_pad = torch.zeros_like(dec_ids, dtype=torch.bool)
        pos = torch.arange(L)
        y = self.drop(self.embed(dec_ids) * math.sqrt(self.cfg.d_model) + self.dec_pos(pos))
        causal = torch.ones(L, L, dtype=torch.bool).tril()
        self_allowed = causal[None] & ~dec_pad[:, None, :]
        # padded queries still need one visible key
        self_allowed = self_allowed | torch.eye(L, dtype=torch.bool)[None]
        cross = (enc_tags[:, None, :] <= dec_tags[:, :, None]) & ~enc_pad[:, None, :]
        for layer in self.decoder:
            y = layer(y, mem, self_allowed, cross)
        return self.dec_norm(y) @ self.embed.weight.t()

    def forward(self, b: Batch):
        mem = self.encode(b.enc_ids, b.enc_tags, b.enc_pad)
        return self.decode(mem, b.enc_tags, b.enc_pad, b.dec_ids, b.dec_tags, b.dec_pad)

    def loss(self, b: Batch):
        logits = self(b)
        return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), b.labels.reshape(-1),
                               ignore_index=IGNORE)


def save_checkpoint(model: Seq2Seq, path, extra=None):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save({"format": "reactgen.seq2seq", "version": CHECKPOINT_VERSION,
                "config": asdict(model.cfg), "state_dict": model.state_dict(),
                "manifest": {k: list(v.shape) for k, v in model.state_dict().items()},
                "extra": extra or {}}, path)


def load_checkpoint(path) -> tuple[Seq2Seq, dict]:
    ck = torch.load(path, map_location="cpu", weights_only=False)
    if ck.get("format") != "reactgen.seq2seq":
        raise ValueError(f"{path} is not a language model checkpoint")
    model = Seq2Seq(ModelConfig(**ck["config"]))
    dtype = next(iter(ck["state_dict"].values())).dtype
    model.to(dtype).load_state_dict(ck["state_dict"])
    model.eval()
    return model, ck.get("extra", {})


# ---------------------------------------------------------------------------
# generation


def _pick(logits, temperature, top_k, generator):
    if temperature is None or temperature <= 0:
        return logits.argmax(-1)
    logits = logits / temperature
    if top_k:
        kth = torch.topk(logits, min(top_k, logits.shape[-1]), dim=-1).values[..., -1:]
        logits = logits.masked_fill(logits < kth, float("-inf"))
    return torch.multinomial(torch.softmax(logits, -1), 1, generator=generator).squeeze(-1)


@torch.no_grad()
def generate(model: Seq2Seq, inputs, eos: int, bos: int, pad: int, max_len: int = 64,
             tags=None, temperature: float = 0.0, top_k: int = 0, seed: int | None = None):
    """Batched autoregressive decoding without causal tags on the decoder side.

    Returns one id list per input, each ending before (excluding) eos.
    """
    model.eval()
    if tags is None:
        tags = [[-1] * len(x) for x in inputs]
    enc_ids = _pad(inputs, pad)
    enc_pad = _pad([[0] * len(x) for x in inputs], 1).bool()
    enc_tags = _pad(tags, OPEN)
    mem = model.encode(enc_ids, enc_tags, enc_pad)
    gen = torch.Generator().manual_seed(seed) if seed is not None else None
    B = len(inputs)
    out = torch.full((B, 1), bos, dtype=torch.long)
    done = torch.zeros(B, dtype=torch.bool)
    max_len = min(max_len, model.cfg.max_len - 1)
    for _ in range(max_len):
        dec_tags = torch.full_like(out, OPEN)
        logits = model.decode(mem, enc_tags, enc_pad, out, dec_tags)[:, -1]
        nxt = _pick(logits, temperature, top_k, gen)
        nxt = torch.where(done, torch.full_like(nxt, pad), nxt)
        out = torch.cat([out, nxt[:, None]], 1)
        done |= nxt == eos
        if done.all():
            break
    res = []
    for row in out[:, 1:].tolist():
        res.append(row[:row.index(eos)] if eos in row else [t for t in row if t != pad])
    return res


@torch.no_grad()
def next_token_logits(model: Seq2Seq, enc_ids, enc_tags, dec_ids, dec_tags, mem=None):
    """Logits for the token after ``dec_ids`` for one sequence (lists in, 1-D tensor out)."""
    e = torch.tensor([enc_ids])
    et = torch.tensor([enc_tags])
    ep = torch.zeros_like(e, dtype=torch.bool)
    if mem is None:
        mem = model.encode(e, et, ep)
    logits = model.decode(mem, et, ep, torch.tensor([dec_ids]), torch.tensor([dec_tags]))
    return logits[0, -1], mem


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    steps: int = 3000
    batch_size: int = 32
    lr: float = 1e-4
    warmup: int = 1000
    eval_every: int = 250
    seed: int = 0
    grad_clip: float = 1.0
    weight_decay: float = 0.0

    @classmethod
    def desk(cls, **kw):
        base = dict(steps=3000, lr=5e-4, warmup=200, eval_every=250)
        base.update(kw)
        return cls(**base)


def lr_at(step, cfg: TrainConfig):
    """Linear warmup to the peak, then constant."""
    if cfg.warmup <= 0:
        return cfg.lr
    return cfg.lr * min(1.0, step / cfg.warmup)


@torch.no_grad()
def evaluate_losses(model: Seq2Seq, buckets: dict[str, list[TrainingSample]], vocab,
                    batch_size: int = 64) -> dict[str, float]:
    """Token-weighted mean loss per task; empty buckets are left out."""
    model.eval()
    out = {}
    for task, samples in buckets.items():
        if not samples:
            continue
        tot, n = 0.0, 0
        for i in range(0, len(samples), batch_size):
            b = collate(samples[i:i + batch_size], vocab)
            logits = model(b)
            l = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), b.labels.reshape(-1),
                                ignore_index=IGNORE, reduction="sum")
            tot += l.item()
            n += int((b.labels != IGNORE).sum())
        out[task] = tot / n
    return out


class JsonlLog:
    def __init__(self, path=None):
        self.f = open(path, "a") if path else None

    def __call__(self, **rec):
        if self.f:
            self.f.write(json.dumps(rec, sort_keys=True) + "\n")
            self.f.flush()

    def close(self):
        if self.f:
            self.f.close()


class Trainer:
    """Shared optimizer/step bookkeeping for pre-training and fine-tuning."""

    def __init__(self, model: Seq2Seq, vocab, cfg: TrainConfig, log_path=None):
        self.model, self.vocab, self.cfg = model, vocab, cfg
        self.opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.step = 0
        self.first_loss = None
        self.rng = np.random.default_rng(cfg.seed)
        self.log = JsonlLog(log_path)
        torch.manual_seed(cfg.seed)

    def update(self, samples, task):
        self.model.train()
        self.step += 1
        for g in self.opt.param_groups:
            g["lr"] = lr_at(self.step, self.cfg)
        loss = self.model.loss(collate(samples, self.vocab))
        if not torch.isfinite(loss):
            raise TrainingDivergence(f"non-finite loss at step {self.step} on task {task}")
        if self.first_loss is None:
            self.first_loss = loss.item()
        elif loss.item() > 10 * self.first_loss:
            raise TrainingDivergence(f"loss {loss.item():.3f} exceeds 10x initial "
                                     f"{self.first_loss:.3f} at step {self.step}")
        self.opt.zero_grad()
        loss.backward()
        if self.cfg.grad_clip:
            nn.utils.clip_grad_norm_(self.model.parameters(), self.cfg.grad_clip)
        self.opt.step()
        self.log(step=self.step, task=task, loss=round(loss.item(), 6))
        return loss.item()

    def draw(self, bucket):
        idx = self.rng.choice(len(bucket), size=min(self.cfg.batch_size, len(bucket)),
                              replace=len(bucket) < self.cfg.batch_size)
        return [bucket[i] for i in idx]


def pretrain(model: Seq2Seq, vocab, train: dict, val: dict, cfg: TrainConfig,
             sampler: TaskSampler | None = None, log_path=None, on_eval=None) -> dict:
    """Loss-weighted multi-task training; restores the best mean-validation-loss state."""
    tasks = [t for t in train if train[t]]
    if not tasks:
        raise ValueError("empty pre-training corpus")
    sampler = sampler or TaskSampler(tasks)
    tr = Trainer(model, vocab, cfg, log_path)
    best, best_state, history = float("inf"), None, []
    while tr.step < cfg.steps:
        task = sampler.sample(tr.rng)
        tr.update(tr.draw(train[task]), task)
        if tr.step % cfg.eval_every == 0 or tr.step == cfg.steps:
            losses = evaluate_losses(model, {t: val.get(t, []) for t in tasks}, vocab)
            sampler.update(losses)
            mean = float(np.mean(list(losses.values()))) if losses else float("nan")
            rec = {"step": tr.step, "val": losses, "weights": sampler.state()["probabilities"]}
            history.append(rec)
            tr.log(step=tr.step, task="validate", loss=mean, per_task=losses)
            if on_eval:
                on_eval(rec)
            if mean < best:
                best = mean
                best_state = {k: v.clone() for k, v in model.state_dict().items()}
    if best_state is not None:
        model.load_state_dict(best_state)
    tr.log.close()
    return {"history": history, "best_val": best, "sampler": sampler.state()}


class TeacherForcingSchedule:
    """ground_truth -> model_prompt once caption BLEU-1 stops improving."""

    def __init__(self, patience: int = 3, min_delta: float = 0.5):
        self.phase = "ground_truth"
        self.patience, self.min_delta = patience, min_delta
        self.best = -float("inf")
        self.stale = 0
        self.switched_at = None

    def set_phase(self, phase):
        if self.phase == "model_prompt" and phase == "ground_truth":
            raise ScheduleRegression("teacher forcing cannot return to ground-truth prompts")
        self.phase = phase

    def observe(self, bleu1_pct: float, step: int = 0) -> bool:
        """Feed a validation BLEU-1 (0-100); True when this call triggers the switch."""
        if self.phase != "ground_truth":
            return False
        if bleu1_pct - self.best < self.min_delta:
            self.stale += 1
        else:
            self.stale = 0
        self.best = max(self.best, bleu1_pct)
        if self.stale >= self.patience:
            self.set_phase("model_prompt")
            self.switched_at = step
            return True
        return False


def think_captions(model, vocab, builder: Builder, items, batch_size=64, max_len=48):
    """Greedy thinking captions from each sample's full action."""
    out = []
    for i in range(0, len(items), batch_size):
        chunk = items[i:i + batch_size]
        inputs = [builder.thinking_input(ts.action_space, ts.action_pose) for ts in chunk]
        for ids in generate(model, inputs, vocab.eos, vocab.bos, vocab.pad, max_len):
            out.append(vocab.decode_text(ids))
    return out


def finetune(model: Seq2Seq, vocab, builder: Builder, train_items, val_items, cfg: TrainConfig,
             schedule: TeacherForcingSchedule | None = None, think: bool = True, log_path=None,
             on_eval=None) -> dict:
    """Thinking + reacting fine-tuning.

    Reacting prompts are ground-truth captions until the schedule hands off, then
    the model's own thinking output, refreshed at every validation. The kept
    checkpoint is the one with the lowest reacting loss under ground-truth captions.
    With ``think=False`` only reacting is trained and its inputs carry no caption.
    """
    from reactgen.evaluation import caption_metrics
    from reactgen.tasks import build_thinking_corpus

    rng = np.random.default_rng(cfg.seed + 1)
    schedule = schedule or TeacherForcingSchedule()
    think_train = build_thinking_corpus(train_items, builder, rng) if think else []
    val_rng = np.random.default_rng(cfg.seed + 2)
    src = "ground_truth" if think else "none"
    val = {"REACT": [builder.reacting(ts, src, rng=val_rng) for ts in val_items]}
    if think:
        val["THINK"] = build_thinking_corpus(val_items, builder, val_rng)
    tasks = ["THINK", "REACT"] if think else ["REACT"]
    sampler = TaskSampler(tasks)
    tr = Trainer(model, vocab, cfg, log_path)
    model_caps: list[str] | None = None
    best, best_state, history = float("inf"), None, []
    prompt_log = {"ground_truth": 0, "model": 0, "none": 0}
    while tr.step < cfg.steps:
        task = sampler.sample(tr.rng)
        if task == "THINK":
            batch = tr.draw(think_train)
        else:
            idx = tr.rng.choice(len(train_items), size=min(cfg.batch_size, len(train_items)),
                                replace=len(train_items) < cfg.batch_size)
            if not think:
                batch = [builder.reacting(train_items[i], "none", rng=tr.rng) for i in idx]
            elif schedule.phase == "ground_truth":
                batch = [builder.reacting(train_items[i], "ground_truth", rng=tr.rng) for i in idx]
            else:
                batch = [builder.reacting(train_items[i], "model", model_caps[i], rng=tr.rng)
                         for i in idx]
            key = "none" if not think else ("ground_truth" if schedule.phase == "ground_truth"
                                            else "model")
            prompt_log[key] += len(batch)
        tr.update(batch, task)
        if tr.step % cfg.eval_every == 0 or tr.step == cfg.steps:
            losses = evaluate_losses(model, val, vocab)
            sampler.update(losses)
            rec = {"step": tr.step, "val": losses, "phase": schedule.phase}
            if think:
                caps = think_captions(model, vocab, builder, val_items)
                refs = [list(ts.captions) for ts in val_items]
                m = caption_metrics(caps, refs)
                rec["bleu1"] = m["bleu1"]
                schedule.observe(100 * m["bleu1"], tr.step)
                if schedule.phase == "model_prompt":
                    model_caps = think_captions(model, vocab, builder, train_items)
            history.append(rec)
            tr.log(step=tr.step, task="validate", loss=float(np.mean(list(losses.values()))),
                   per_task=losses, phase=rec["phase"])
            if on_eval:
                on_eval(rec)
            score = losses["REACT"]
            if score < best:
                best = score
                best_state = {k: v.clone() for k, v in model.state_dict().items()}
    if best_state is not None:
        model.load_state_dict(best_state)
    tr.log.close()
    return {"history": history, "best_val": best, "switched_at": schedule.switched_at,
            "phase": schedule.phase, "prompts": prompt_log}
