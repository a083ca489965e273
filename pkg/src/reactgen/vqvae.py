"""VQ-VAE pose tokenizer over egocentric motion features.

The encoder is built from left-padded convolutions, so pose token ``j`` only
depends on frames ``<= 4j + 3``. Tokenizing a growing prefix of a stream
therefore reproduces the tokens of the full sequence.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from reactgen.motion import (FeatureLayout, FeatureSequence, MotionSequence, compute_features,
                             denormalize, normalize_egocentric)
from reactgen.space import SpaceBinConfig, SpaceTokens, decode_space, encode_space
from reactgen.synth import rest_pose

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDivergence(RuntimeError):
    pass


class UntrainedTokenizerError(RuntimeError):
    pass


@dataclass
class PoseTokenizerConfig:
    feature_dim: int = 262
    downsample: int = 4
    width: int = 512
    code_dim: int = 512
    num_codes: int = 256
    n_res: int = 3
    velocity_weight: float = 0.5
    commit_weight: float = 0.02
    ema_decay: float = 0.99
    ema_eps: float = 1e-5
    reset_after: int = 256
    causal_encoder: bool = True
    lr: float = 1e-4

    def __post_init__(self):
        if self.downsample < 1 or self.downsample & (self.downsample - 1):
            raise ValueError("downsample rate must be a power of two >= 1")
        if self.velocity_weight < 0 or self.commit_weight < 0:
            raise ValueError("loss weights must be non-negative")

    @property
    def n_down(self) -> int:
        return int(math.log2(self.downsample))

    @classmethod
    def desk(cls, **kw):
        base = dict(width=64, code_dim=64, num_codes=128, lr=1e-3)
        base.update(kw)
        return cls(**base)

    @classmethod
    def tiny(cls, **kw):
        base = dict(width=8, code_dim=8, num_codes=16, n_res=1)
        base.update(kw)
        return cls(**base)


class Conv(nn.Conv1d):
    """Conv1d with either centered or left-only (causal) padding."""

    def __init__(self, c_in, c_out, k, stride=1, dilation=1, causal=False):
        super().__init__(c_in, c_out, k, stride=stride, dilation=dilation)
        total = dilation * (k - 1) - (stride - 1)
        self.pad = (total, 0) if causal else (total // 2, total - total // 2)

    def forward(self, x):
        return super().forward(F.pad(x, self.pad))


class ResBlock(nn.Module):
    def __init__(self, width, dilation, causal):
        super().__init__()
        self.conv1 = Conv(width, width, 3, dilation=dilation, causal=causal)
        self.conv2 = nn.Conv1d(width, width, 1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(F.relu(x))))


def _res_stack(width, depth, causal):
    return nn.Sequential(*[ResBlock(width, 3 ** i, causal) for i in range(depth)])


class Encoder(nn.Module):
    def __init__(self, cfg: PoseTokenizerConfig):
        super().__init__()
        c = cfg.causal_encoder
        layers = [Conv(cfg.feature_dim, cfg.width, 3, causal=c), nn.ReLU()]
        for _ in range(cfg.n_down):
            layers += [Conv(cfg.width, cfg.width, 4, stride=2, causal=c),
                       _res_stack(cfg.width, cfg.n_res, c)]
        layers += [Conv(cfg.width, cfg.code_dim, 3, causal=c)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):  # (B, T, D) -> (B, T/rate, d)
        return self.net(x.transpose(1, 2)).transpose(1, 2)


class Decoder(nn.Module):
    def __init__(self, cfg: PoseTokenizerConfig):
        super().__init__()
        layers = [Conv(cfg.code_dim, cfg.width, 3), nn.ReLU()]
        for _ in range(cfg.n_down):
            layers += [_res_stack(cfg.width, cfg.n_res, False), nn.Upsample(scale_factor=2, mode="nearest"),
                       Conv(cfg.width, cfg.width, 3)]
        layers += [Conv(cfg.width, cfg.width, 3), nn.ReLU(), Conv(cfg.width, cfg.feature_dim, 3)]
        self.net = nn.Sequential(*layers)

    def forward(self, q):
        return self.net(q.transpose(1, 2)).transpose(1, 2)


class Codebook(nn.Module):
    """Code table updated only by EMA statistics, never by gradients."""

    def __init__(self, num_codes, code_dim, decay=0.99, eps=1e-5, reset_after=256,
                 dtype=torch.float32):
        super().__init__()
        self.decay, self.eps, self.reset_after = decay, eps, reset_after
        self.register_buffer("entries", torch.zeros(num_codes, code_dim, dtype=dtype))
        self.register_buffer("ema_cluster_size", torch.ones(num_codes, dtype=dtype))
        self.register_buffer("ema_embed_sum", torch.zeros(num_codes, code_dim, dtype=dtype))
        self.register_buffer("steps_since_used", torch.zeros(num_codes, dtype=torch.long))
        self.register_buffer("initialized", torch.tensor(False))

    @property
    def num_codes(self):
        return self.entries.shape[0]

    @torch.no_grad()
    def init_from(self, latents, generator=None):
        idx = _sample_rows(latents.shape[0], self.num_codes, generator)
        self.entries.copy_(latents[idx])
        self.ema_embed_sum.copy_(self.entries)
        self.ema_cluster_size.fill_(1.0)
        self.initialized.fill_(True)

    def quantize(self, latents):
        """Nearest entry per row; ties resolve to the lowest index."""
        d = torch.cdist(latents.unsqueeze(0), self.entries.unsqueeze(0).to(latents.dtype),
                        compute_mode="donot_use_mm_for_euclid_dist")[0]
        return torch.argmin(d, dim=1)

    @torch.no_grad()
    def ema_update(self, latents, assignments):
        onehot = F.one_hot(assignments, self.num_codes).to(self.entries.dtype)
        counts = onehot.sum(0)
        sums = onehot.t() @ latents.to(self.entries.dtype)
        g = self.decay
        self.ema_cluster_size.mul_(g).add_((1 - g) * counts)
        self.ema_embed_sum.mul_(g).add_((1 - g) * sums)
        self.entries.copy_(self.ema_embed_sum / (self.ema_cluster_size + self.eps).unsqueeze(1))
        used = counts > 0
        self.steps_since_used.add_(1)
        self.steps_since_used[used] = 0
        return counts

    @torch.no_grad()
    def reset_dead(self, latents, generator=None):
        """Re-seed entries unused for ``reset_after`` steps from batch rows."""
        dead = torch.nonzero(self.steps_since_used >= self.reset_after).flatten()
        if dead.numel() == 0:
            return dead
        rows = latents[_sample_rows(latents.shape[0], dead.numel(), generator)].to(self.entries.dtype)
        self.entries[dead] = rows
        self.ema_cluster_size[dead] = 1.0
        self.ema_embed_sum[dead] = rows * (1.0 + self.eps)
        self.steps_since_used[dead] = 0
        return dead


def _sample_rows(n_rows, k, generator=None):
    """k row indices; without replacement when the batch is large enough."""
    if n_rows >= k:
        return torch.randperm(n_rows, generator=generator)[:k]
    return torch.randint(n_rows, (k,), generator=generator)


@dataclass
class LossReport:
    total: float
    recon: float
    velocity: float
    commit: float
    perplexity: float
    codes_used: int


class PoseVQVAE(nn.Module):
    def __init__(self, cfg: PoseTokenizerConfig, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.codebook = Codebook(cfg.num_codes, cfg.code_dim, cfg.ema_decay, cfg.ema_eps,
                                 cfg.reset_after, dtype=dtype)
        self.register_buffer("feat_mean", torch.zeros(cfg.feature_dim, dtype=dtype))
        self.register_buffer("feat_std", torch.ones(cfg.feature_dim, dtype=dtype))
        self.to(dtype)

    def pad(self, x):
        """Right-pad (B, T, D) by repeating the last frame to a multiple of the rate."""
        rate = self.cfg.downsample
        if x.shape[1] < rate:
            raise ValueError(f"sequence of {x.shape[1]} frames is shorter than one "
                             f"downsample window ({rate})")
        extra = -x.shape[1] % rate
        if extra:
            x = torch.cat([x, x[:, -1:].expand(-1, extra, -1)], dim=1)
        return x

    def encode(self, x):
        return self.encoder(self.pad(x))

    def quantize(self, z):
        flat = z.reshape(-1, z.shape[-1])
        idx = self.codebook.quantize(flat)
        q = self.codebook.entries[idx].to(z.dtype).view_as(z)
        return idx.view(z.shape[:-1]), q

    def decode(self, q):
        return self.decoder(q)

    def forward(self, x, update_codebook=None, generator=None):
        z = self.encode(x)
        if update_codebook is None:
            update_codebook = self.training
        if update_codebook and not bool(self.codebook.initialized):
            self.codebook.init_from(z.detach().reshape(-1, z.shape[-1]), generator)
        idx, q = self.quantize(z)
        q = q.clone()
        if update_codebook:
            flat = z.detach().reshape(-1, z.shape[-1])
            self.codebook.ema_update(flat, idx.flatten())
            self.codebook.reset_dead(flat, generator)
        q_st = z + (q - z).detach()
        return self.decode(q_st), z, q, idx

    def loss(self, x, recon, z, q):
        x = self.pad(x)
        l_rec = F.l1_loss(recon, x)
        l_vel = F.l1_loss(recon[:, 1:] - recon[:, :-1], x[:, 1:] - x[:, :-1])
        l_commit = F.mse_loss(z, q.detach())
        total = l_rec + self.cfg.velocity_weight * l_vel + self.cfg.commit_weight * l_commit
        return total, l_rec, l_vel, l_commit


def train_step(model: PoseVQVAE, batch, optimizer, generator=None) -> LossReport:
    model.train()
    recon, z, q, idx = model(batch, generator=generator)
    total, l_rec, l_vel, l_commit = model.loss(batch, recon, z, q)
    if not torch.isfinite(total):
        raise TrainingDivergence(
            f"non-finite tokenizer loss: recon={l_rec.item()} vel={l_vel.item()} "
            f"commit={l_commit.item()} latent_abs_max={z.abs().max().item()}")
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    counts = torch.bincount(idx.flatten(), minlength=model.cfg.num_codes).float()
    p = counts / counts.sum()
    perplexity = torch.exp(-(p * torch.log(p + 1e-10)).sum()).item()
    return LossReport(total.item(), l_rec.item(), l_vel.item(), l_commit.item(), perplexity,
                      int((counts > 0).sum()))


# ---------------------------------------------------------------------------
# full motion tokenizer


@dataclass
class MotionTokenizer:
    model: PoseVQVAE
    bins: SpaceBinConfig | None = None
    rest: np.ndarray = field(default_factory=rest_pose)

    @property
    def cfg(self):
        return self.model.cfg

    @property
    def layout(self):
        return FeatureLayout((self.cfg.feature_dim + 2) // 12)

    def _check(self):
        if self.bins is None or not bool(self.model.codebook.initialized):
            raise UntrainedTokenizerError("tokenizer has no trained codebook / fitted space bins")

    def normalize_features(self, feats: np.ndarray) -> torch.Tensor:
        t = torch.as_tensor(feats, dtype=self.model.feat_mean.dtype)
        return (t - self.model.feat_mean) / self.model.feat_std

    def features_of(self, seq: MotionSequence):
        local, state = normalize_egocentric(seq)
        return compute_features(local, self.rest).features, state

    @torch.no_grad()
    def encode_pose(self, seqs) -> list[tuple]:
        """Pose tokens for a batch of sequences (any lengths >= rate)."""
        self._check()
        self.model.eval()
        out = []
        for seq in seqs:
            feats, _ = self.features_of(seq)
            z = self.model.encode(self.normalize_features(feats)[None])
            idx, _ = self.model.quantize(z)
            out.append(tuple(int(i) for i in idx[0]))
        return out

    def tokenize(self, seq: MotionSequence) -> tuple[SpaceTokens, tuple]:
        self._check()
        _, state = normalize_egocentric(seq)
        return encode_space(state, self.bins), self.encode_pose([seq])[0]

    @torch.no_grad()
    def decode_features(self, pose_tokens) -> np.ndarray:
        self.model.eval()
        idx = torch.as_tensor(list(pose_tokens), dtype=torch.long)
        if idx.numel() == 0:
            raise ValueError("no pose tokens to decode")
        q = self.model.codebook.entries[idx][None]
        feats = self.model.decode(q)[0] * self.model.feat_std + self.model.feat_mean
        return feats.double().numpy()

    def detokenize(self, space: SpaceTokens, pose_tokens, fps: int = 30) -> MotionSequence:
        self._check()
        feats = FeatureSequence(self.decode_features(pose_tokens), self.layout, fps)
        local = MotionSequence(feats.positions(), fps)
        return denormalize(local, decode_space(space, self.bins))

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        torch.save({
            "format": "reactgen.pose_tokenizer",
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.cfg),
            "state_dict": self.model.state_dict(),
            "space_bins": self.bins.to_dict() if self.bins else None,
            "rest_pose": self.rest.tolist(),
        }, path)

    @classmethod
    def load(cls, path):
        ck = torch.load(path, map_location="cpu", weights_only=False)
        if ck.get("format") != "reactgen.pose_tokenizer":
            raise ValueError(f"{path} is not a pose tokenizer checkpoint")
        cfg = PoseTokenizerConfig(**ck["config"])
        dtype = ck["state_dict"]["feat_mean"].dtype
        model = PoseVQVAE(cfg, dtype=dtype)
        model.load_state_dict(ck["state_dict"])
        bins = SpaceBinConfig.from_dict(ck["space_bins"]) if ck["space_bins"] else None
        return cls(model, bins, np.array(ck["rest_pose"]))


def _person_sequences(samples):
    for s in samples:
        yield s.action
        yield s.reaction


def feature_bank(samples, rest, rng: np.random.Generator, clips_per_seq: int = 1,
                 min_clip: int = 16):
    """Normalized feature arrays: each full sequence plus random re-normalized clips."""
    bank = []
    for seq in _person_sequences(samples):
        bank.append(compute_features(normalize_egocentric(seq)[0], rest).features)
        for _ in range(clips_per_seq):
            n = seq.num_frames
            length = int(rng.integers(min(min_clip, n), n + 1))
            start = int(rng.integers(0, n - length + 1))
            clip = seq.slice(start, start + length)
            bank.append(compute_features(normalize_egocentric(clip)[0], rest).features)
    return bank


def _windows(bank, rng, batch_size, window):
    out = []
    for _ in range(batch_size):
        f = bank[int(rng.integers(len(bank)))]
        if f.shape[0] <= window:
            pad = np.repeat(f[-1:], window - f.shape[0], axis=0)
            out.append(np.concatenate([f, pad]))
        else:
            s = int(rng.integers(0, f.shape[0] - window + 1))
            out.append(f[s:s + window])
    return np.stack(out)


@torch.no_grad()
def reconstruction_loss(model: PoseVQVAE, bank_t, batch_size=64):
    model.eval()
    total, n = 0.0, 0
    for i in range(0, len(bank_t), batch_size):
        xs = bank_t[i:i + batch_size]
        for x in xs:
            recon, z, q, _ = model(x[None], update_codebook=False)
            total += F.l1_loss(recon[:, :x.shape[0]], x[None]).item()
            n += 1
    return total / max(n, 1)


def train_tokenizer(train_samples, val_samples, cfg: PoseTokenizerConfig, *, steps=3000,
                    batch_size=32, window=64, seed=0, eval_every=250, patience=20,
                    n_bins=10, log_fn=None) -> tuple[MotionTokenizer, dict]:
    """Fit feature statistics, space bins and the VQ-VAE; early-stops on val L1."""
    from reactgen.space import fit_bins
    from reactgen.motion import space_state_at

    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    rest = rest_pose()
    bank = feature_bank(train_samples, rest, rng)
    stacked = np.concatenate(bank)
    mean = stacked.mean(0)
    std = np.maximum(stacked.std(0), 1e-2)

    model = PoseVQVAE(cfg)
    model.feat_mean.copy_(torch.as_tensor(mean, dtype=torch.float32))
    model.feat_std.copy_(torch.as_tensor(std, dtype=torch.float32))
    norm = lambda a: (torch.as_tensor(a, dtype=torch.float32) - model.feat_mean) / model.feat_std
    bank_n = [((b - mean) / std).astype(np.float32) for b in bank]
    val_bank = [norm(compute_features(normalize_egocentric(s)[0], rest).features)
                for s in _person_sequences(val_samples)]

    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=0.0)
    history = {"train": [], "val": [], "usage": []}
    best, best_state, bad = float("inf"), None, 0
    usage = torch.zeros(cfg.num_codes)
    first = None
    for step in range(1, steps + 1):
        batch = torch.as_tensor(_windows(bank_n, rng, batch_size, window))
        rep = train_step(model, batch, opt, generator=gen)
        first = first or rep.total
        if rep.total > 10 * first and step > 100:
            raise TrainingDivergence(f"tokenizer loss {rep.total:.4f} exceeds 10x initial {first:.4f}")
        history["train"].append(rep.total)
        if step % eval_every == 0 or step == steps:
            val = reconstruction_loss(model, val_bank) if val_bank else rep.recon
            history["val"].append((step, val))
            if log_fn:
                log_fn({"step": step, "loss": rep.total, "val_l1": val, "codes_used": rep.codes_used,
                        "perplexity": rep.perplexity})
            if val < best - 1e-6:
                best, bad = val, 0
                best_state = {k: v.clone() for k, v in model.state_dict().items()}
            else:
                bad += 1
                if bad >= patience:
                    break
    if best_state is not None:
        model.load_state_dict(best_state)
    states = []
    for s in train_samples:
        states += [space_state_at(s.action), space_state_at(s.reaction)]
    tok = MotionTokenizer(model, fit_bins(states, n_bins), rest)
    history["best_val"] = best
    return tok, history


@torch.no_grad()
def codebook_usage(tok: MotionTokenizer, samples) -> float:
    """Fraction of entries used at least once over one pass of ``samples``."""
    used = set()
    for toks in tok.encode_pose(list(_person_sequences(samples))):
        used.update(toks)
    return len(used) / tok.cfg.num_codes
