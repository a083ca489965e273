"""Acceptance checks, one test per numbered criterion.

Criteria 1-8 are fast oracle checks. 9-11 drive the desk-scale pipeline through
the command line twice in temporary workspaces (roughly an hour each on one
CPU). Set REACTGEN_ACCEPT_DIR to keep the two workspaces for inspection.
A PASS/FAIL line per criterion is printed in the terminal summary.
"""

import json
import math
import os
import resource
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from reactgen.evaluation import caption_metrics, diversity, fid, r_precision
from reactgen.lm import ModelConfig, Seq2Seq, collate
from reactgen.runtime import ReactionStream, RethinkPolicy
from reactgen.space import ChannelBins, SpaceTokens
from reactgen.tasks import Builder, TrainingSample
from reactgen.vqvae import Codebook, PoseTokenizerConfig, PoseVQVAE

crit = pytest.mark.criterion


# ---------------------------------------------------------------------------
# helpers


def _codebook(entries):
    cb = Codebook(len(entries), entries.shape[1], dtype=torch.float64)
    cb.entries.copy_(entries)
    cb.ema_embed_sum.copy_(entries)
    cb.initialized.fill_(True)
    return cb


def _central_diff(loss_fn, params, rng, per_tensor=3, h=1e-6):
    grads = torch.autograd.grad(loss_fn(), params)
    worst, checked = 0.0, 0
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat, gflat = p.data.view(-1), g.view(-1)
            for i in rng.choice(flat.numel(), min(per_tensor, flat.numel()), replace=False):
                old = flat[i].item()
                flat[i] = old + h
                up = loss_fn().item()
                flat[i] = old - h
                dn = loss_fn().item()
                flat[i] = old
                fd, an = (up - dn) / (2 * h), gflat[i].item()
                if max(abs(fd), abs(an)) < 1e-8:
                    continue
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an)))
                checked += 1
    return worst, checked


def _react_sample(builder, rng, n=6, n_pose=16):
    v = builder.v
    space = SpaceTokens(*rng.integers(0, 10, 3).tolist())
    inp, et = builder.reacting_input(v.encode_text("a person waves"), space,
                                     rng.integers(0, n_pose, n).tolist())
    tgt, dt = builder.reacting_target(SpaceTokens(*rng.integers(0, 10, 3).tolist()),
                                      rng.integers(0, n_pose, n).tolist())
    return TrainingSample("REACT", inp, tgt, et, dt)


# ---------------------------------------------------------------------------
# 1-8


@crit(1, "space tokens exact")
def test_space_tokenizer_exact():
    t0 = time.perf_counter()
    assert ChannelBins(-1, 1, 20).encode(0.55) == 15
    for n in (2, 10, 20):
        b = ChannelBins(-1, 1, n)
        assert [b.encode(b.decode(k)) for k in range(n)] == list(range(n))
    b = ChannelBins(-1, 1, 10)
    vals = np.random.default_rng(0).uniform(-1, 1, 100_000)
    err = max(abs(b.decode(b.encode(v)) - v) for v in vals)
    assert err <= b.width / 2 + 1e-12
    assert time.perf_counter() - t0 < 1.0


@crit(2, "quantize == brute-force NN")
def test_quantizer_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    for trial in range(10_000):
        k, d = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        if trial % 2:   # integer grids: exact ties are frequent
            entries, lat = rng.integers(-1, 2, (k, d)).astype(float), rng.integers(-1, 2, (1, d))
        else:
            entries, lat = rng.standard_normal((k, d)), rng.standard_normal((1, d))
        dist = ((lat.astype(float) - entries) ** 2).sum(1)
        want = int(np.flatnonzero(dist == dist.min())[0])   # first minimum wins ties
        got = _codebook(torch.tensor(entries)).quantize(torch.tensor(lat, dtype=torch.float64))
        assert int(got[0]) == want
    assert time.perf_counter() - t0 < 10.0


@crit(3, "EMA recursion and dead-entry reset")
def test_ema_and_reset():
    g, eps = 0.99, 1e-5
    cb = _codebook(torch.tensor([[0.0, 0.0], [3.0, 3.0]], dtype=torch.float64))
    cb.decay, cb.eps = g, eps
    size, summ = np.ones(2), np.array([[0.0, 0.0], [3.0, 3.0]])
    rng = np.random.default_rng(3)
    for _ in range(100):
        lat = np.concatenate([rng.normal(0, 0.3, (5, 2)), rng.normal(3, 0.3, (3, 2))])
        assign = np.array([0] * 5 + [1] * 3)
        size = g * size + (1 - g) * np.bincount(assign, minlength=2)
        summ = g * summ + (1 - g) * np.stack([lat[assign == k].sum(0) for k in range(2)])
        cb.ema_update(torch.tensor(lat), torch.tensor(assign))
        assert np.abs(cb.entries.numpy() - summ / (size + eps)[:, None]).max() < 1e-10

    dead = _codebook(torch.tensor([[0.0, 0.0], [100.0, 100.0]], dtype=torch.float64))
    dead.reset_after = 5
    batch = torch.tensor([[0.1, 0.2], [0.3, -0.1], [-0.2, 0.0]], dtype=torch.float64)
    for _ in range(5):
        dead.ema_update(batch, dead.quantize(batch))
    assert dead.reset_dead(batch, torch.Generator().manual_seed(0)).tolist() == [1]
    assert any(torch.equal(dead.entries[1], row) for row in batch)


@crit(4, "gradient checks and straight-through")
def test_gradient_checks(vocab, templates):
    rng = np.random.default_rng(0)
    # transformer, desk layout at width 8
    torch.manual_seed(0)
    model = Seq2Seq(ModelConfig.preset("desk", len(vocab), d_model=8, n_heads=2, d_ff=16,
                                       dropout=0.0)).double().eval()
    builder = Builder(vocab, templates)
    batch = collate([_react_sample(builder, rng, 4), _react_sample(builder, rng, 3)], vocab)
    worst, checked = _central_diff(lambda: model.loss(batch), list(model.parameters()), rng)
    assert checked > 20 and worst < 1e-3

    # VQ-VAE at width 8, through the straight-through surrogate
    torch.manual_seed(0)
    m = PoseVQVAE(PoseTokenizerConfig.tiny(feature_dim=6), dtype=torch.float64)
    x = torch.randn(2, 16, 6, dtype=torch.float64)
    m.train()
    m(x, generator=torch.Generator().manual_seed(0))
    m.eval()
    with torch.no_grad():
        z0 = m.encode(x)
        _, q0 = m.quantize(z0)
        offset = q0 - z0

    def vq_loss():
        z = m.encode(x)
        return m.loss(x, m.decode(z + offset), z, q0)[0]

    worst, checked = _central_diff(vq_loss, list(m.parameters()), rng, per_tensor=4)
    assert checked > 20 and worst < 1e-3

    z = m.encode(x).detach().requires_grad_(True)
    _, q = m.quantize(z)
    l1 = torch.nn.functional.l1_loss(m.decode(z + (q - z).detach()), m.pad(x))
    (gz,) = torch.autograd.grad(l1, z)
    qq = q.detach().clone().requires_grad_(True)
    (gq,) = torch.autograd.grad(torch.nn.functional.l1_loss(m.decode(qq), m.pad(x)), qq)
    assert torch.equal(gz, gq)


@crit(5, "token count law")
def test_token_count_law():
    m = PoseVQVAE(PoseTokenizerConfig.desk()).eval()
    with torch.no_grad():
        for n_f in range(4, 201):
            assert m.encode(torch.zeros(1, n_f, m.cfg.feature_dim)).shape[1] == math.ceil(n_f / 4)


@crit(6, "causality (teacher forced + streaming)")
def test_causality(vocab, templates):
    builder = Builder(vocab, templates)
    torch.manual_seed(0)
    model = Seq2Seq(ModelConfig.preset("desk", len(vocab))).eval()
    rng = np.random.default_rng(0)
    for _ in range(100):
        s = _react_sample(builder, rng, 8)
        t = int(rng.integers(0, 7))
        other = [vocab.pose_id(int(rng.integers(16))) if tag > t else tok
                 for tok, tag in zip(s.input, s.enc_tags)]
        s2 = TrainingSample("REACT", other, s.target, s.enc_tags, s.dec_tags)
        with torch.no_grad():
            a, b = model(collate([s], vocab))[0], model(collate([s2], vocab))[0]
        rows = [i for i, tag in enumerate(s.dec_tags) if tag <= t]
        assert torch.equal(a[rows], b[rows])

    torch.manual_seed(1)
    small = Seq2Seq(ModelConfig.preset("tiny", len(vocab))).eval()
    for trial in range(100):
        n = int(rng.integers(2, 9))
        t = int(rng.integers(1, n))
        head = [vocab.space_id(c, int(rng.integers(10))) for c in "xzr"]
        a = head + [vocab.pose_id(int(rng.integers(16))) for _ in range(n)]
        b = a[:3 + t] + [vocab.pose_id(int(rng.integers(16))) for _ in range(n - t)]
        runs = []
        for toks in (a, b):
            st = ReactionStream(small, vocab, builder, RethinkPolicy(2), seed=trial)
            runs.append([st.on_action_token(x) for x in toks])
        assert runs[0][:3 + t] == runs[1][:3 + t]


@crit(7, "re-thinking schedule")
def test_rethink_schedule():
    for n_r in (1, 2, 4, 16):
        p = RethinkPolicy(n_r)
        for T in range(1, 101):
            assert sum(p.fires(t) for t in range(1, T + 1)) == 1 + (T - 1) // n_r
    assert [t for t in range(1, 11) if RethinkPolicy(4).fires(t)] == [1, 5, 9]


@crit(8, "metric oracles")
def test_metric_oracles():
    rng = np.random.default_rng(8)
    a = rng.standard_normal((1000, 6))
    assert abs(fid(a, a)) < 1e-8
    d, mu, s = 4, np.ones(4), 2.0
    exact = mu @ mu + d * (1 + s ** 2 - 2 * s)
    got = fid(rng.standard_normal((10_000, d)), mu + s * rng.standard_normal((10_000, d)))
    assert abs(got - exact) / exact < 0.02

    f = rng.standard_normal((320, 16))
    assert r_precision(f, f)[1] == 1.0
    tops = [r_precision(np.random.default_rng(k).standard_normal((3200, 8)),
                        np.random.default_rng(k + 100).standard_normal((3200, 8)), seed=k)[1]
            for k in range(20)]
    assert abs(np.mean(tops) - 1 / 32) < 0.01

    x = rng.standard_normal((50, 5))
    brute = np.mean([np.linalg.norm(x[i] - x[j]) for i in range(50) for j in range(i + 1, 50)])
    assert abs(diversity(x) - brute) < 1e-9

    m = caption_metrics(["the cat sat on the mat", "a dog runs"],
                        [["the cat is on the mat"], ["a dog runs fast"]])
    # clipped unigram matches 5 + 3 of 9 candidate words; brevity penalty exp(1 - 10/9)
    assert m["bleu1"] == pytest.approx(8 / 9 * math.exp(1 - 10 / 9), abs=1e-12)


# ---------------------------------------------------------------------------
# 9-11: desk pipeline via the command line

CHAIN = [["synth-data"], ["train-tokenizer"], ["pretrain"], ["finetune"],
         ["evaluate", "--arms", "real,shuffled,full,w/-gt-prompt", "--captions"],
         ["ablate", "w/o-think"]]
SWEEPS = [["sweep", "rethink"], ["sweep", "fps"], ["plot"]]


def _run_pipeline(home: Path):
    home.mkdir(parents=True, exist_ok=True)
    env = {**os.environ, "REACTGEN_HOME": str(home)}
    times = {}

    def go(cmds):
        for args in cmds:
            t = time.perf_counter()
            r = subprocess.run([sys.executable, "-m", "reactgen.cli", *args], env=env,
                               capture_output=True, text=True)
            (home / f"{args[0]}.out").write_text(r.stdout + r.stderr)
            assert r.returncode == 0, f"{' '.join(args)} failed: {r.stderr[-2000:]}"
            times[" ".join(args)] = time.perf_counter() - t

    cpu0 = resource.getrusage(resource.RUSAGE_CHILDREN)
    t0 = time.perf_counter()
    go(CHAIN)
    cpu1 = resource.getrusage(resource.RUSAGE_CHILDREN)
    chain = {"wall_s": time.perf_counter() - t0,
             "cpu_s": (cpu1.ru_utime + cpu1.ru_stime) - (cpu0.ru_utime + cpu0.ru_stime)}
    go(SWEEPS)
    (home / "stage_times.json").write_text(json.dumps({**times, "chain": chain}, indent=1))
    return {"home": home, "chain": chain, "times": times}


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    keep = os.environ.get("REACTGEN_ACCEPT_DIR")
    root = Path(keep) if keep else tmp_path_factory.mktemp("desk")
    return [_run_pipeline(root / f"run{k}") for k in (1, 2)]


def _metrics(home, tag="metrics"):
    path = home / "reports" / f"{tag}.jsonl"
    return {r["arm"]: r for r in map(json.loads, path.read_text().splitlines())}


@crit(9, "end-to-end toy reproduction")
def test_end_to_end(desk_runs):
    run = desk_runs[0]
    assert run["chain"]["cpu_s"] <= 3600 and run["chain"]["wall_s"] <= 3600
    m = _metrics(run["home"])
    # (a) matcher on held-out real pairs
    assert m["real"]["top1"]["mean"] >= 0.8
    assert m["real"]["acc"]["mean"] >= 0.9
    # (b) generated reactions beat chance and a shuffled pairing
    assert m["full"]["acc"]["mean"] >= 2 / 8
    assert m["full"]["fid"]["mean"] < m["shuffled"]["fid"]["mean"]
    # (c) ablation order
    ab = _metrics(run["home"], "ablation_wo_think")
    fids = [ab["w/o-think"]["fid"]["mean"], m["full"]["fid"]["mean"], m["w/-gt-prompt"]["fid"]["mean"]]
    assert fids[0] > fids[1] > fids[2], f"FID w/o-think, full, w/-gt-prompt = {fids}"


@crit(10, "sweep harness and AITS trend")
def test_sweeps(desk_runs):
    rep = desk_runs[0]["home"] / "reports"
    for name in ("sweep_rethink.jsonl", "sweep_rethink_fid.tsv", "timing_sweep_rethink_aits.tsv",
                 "sweep_fps.jsonl", "sweep_fps.tsv"):
        assert (rep / name).stat().st_size > 0, name
    assert (rep / "figures" / "rethink_aits.png").exists()
    rows = [l.split("\t") for l in (rep / "timing_sweep_rethink_aits.tsv").read_text().splitlines()[1:]]
    intervals, aits = [int(a) for a, _ in rows], [float(b) for _, b in rows]
    assert intervals == sorted(intervals) and len(intervals) >= 4
    assert all(b < a for a, b in zip(aits, aits[1:])), aits


@crit(11, "byte-stable metric reports")
def test_reproducible(desk_runs):
    a, b = (r["home"] / "reports" for r in desk_runs)
    names = sorted(p.name for p in a.iterdir()
                   if p.is_file() and not p.name.startswith("timing_"))
    assert "metrics.jsonl" in names and "sweep_rethink.jsonl" in names
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
