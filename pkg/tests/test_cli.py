import json
import subprocess
import sys

import pytest
import yaml

from reactgen import cli
from reactgen import pipeline as pl

TINY = {
    "version": 1,
    "seed": 3,
    "data": {"classes": ["wave", "bow"], "train_per_class": 4, "val_per_class": 1,
             "test_per_class": 4, "n_frames": 48, "clips_per_sample": 1},
    "tokenizer": {"preset": "tiny", "steps": 20, "batch_size": 4, "window": 16,
                  "eval_every": 10},
    "model": {"preset": "tiny", "max_len": 128, "dropout": 0.0},
    "pretrain": {"steps": 6, "batch_size": 4, "eval_every": 3, "warmup": 2},
    "finetune": {"steps": 6, "batch_size": 4, "eval_every": 3, "warmup": 2},
    "eval": {"preset": "tiny", "steps": 10, "seeds": 2, "batch": 4, "train_per_class": 6},
    "sweep": {"intervals": [1, 4], "fps": [0, 1], "samples": 4, "seeds": 2, "matcher_steps": 5},
}


@pytest.fixture(scope="module")
def home(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    (root / "tiny.yaml").write_text(yaml.safe_dump(TINY))
    return root


def run(home, *args):
    return cli.main(["--config", str(home / "tiny.yaml"), "--home", str(home), *args])


def test_missing_upstream(home, capsys):
    assert run(home, "pretrain") == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error E_MISSING:")


def test_full_chain(home, capsys):
    assert run(home, "synth-data") == 0
    assert json.loads(capsys.readouterr().out) == {"train": 8, "val": 2, "test": 8}
    assert run(home, "train-tokenizer") == 0
    assert (home / "checkpoints" / "tokenizer.pt").exists()
    assert (home / "checkpoints" / "space_bins.json").exists()
    assert run(home, "pretrain") == 0
    assert run(home, "finetune") == 0
    capsys.readouterr()
    assert run(home, "evaluate", "--captions") == 0
    table = capsys.readouterr().out
    assert "full" in table and "shuffled" in table
    metrics = pl.read_metrics(pl.Workspace(TINY, home), "metrics")
    assert set(metrics) == {"real", "shuffled", "full"}
    assert metrics["real"]["fid"]["mean"] == 0.0
    assert (home / "reports" / "captioning.json").exists()
    timing = json.loads((home / "reports" / "timing_metrics.json").read_text())
    assert "aits_s" in timing["full"]


def test_react_stream(home, capsys):
    from reactgen.motion import load_sample
    s = load_sample(home / "data" / "test" / "00000")
    frames = "\n".join(json.dumps(f.tolist()) for f in s.action.frames[:20])
    out = home / "events.jsonl"
    rep = home / "episode.json"
    sys_stdin = sys.stdin
    try:
        import io
        sys.stdin = io.StringIO(frames)
        assert run(home, "react", "--input", "-", "--interval", "2", "--out", str(out),
                   "--report", str(rep)) == 0
    finally:
        sys.stdin = sys_stdin
    events = [json.loads(l) for l in out.read_text().splitlines()]
    kinds = {e["event"] for e in events}
    assert kinds == {"caption", "reaction_frames"}
    frames_ev = [e for e in events if e["event"] == "reaction_frames"]
    assert len(frames_ev) == 5 and all(len(e["payload"]) == 4 for e in frames_ev)
    report = json.loads(rep.read_text())
    assert [t for t, _ in report["thinks"]] == [1, 3, 5]


def test_sweeps_and_plot(home, capsys):
    assert run(home, "sweep", "rethink") == 0
    rows = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert [r["interval"] for r in rows] == [1, 4]
    assert run(home, "sweep", "fps") == 0
    capsys.readouterr()
    assert (home / "reports" / "sweep_fps.tsv").read_text().startswith("fps\tscore_gap")
    assert run(home, "plot") == 0
    assert (home / "reports" / "figures" / "rethink_fid.png").exists()


def test_ablate(home, capsys):
    assert run(home, "ablate", "w/o-think") == 0
    assert "w/o-think" in capsys.readouterr().out


def test_config_errors(home, tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: 1\n")
    assert cli.main(["--config", str(bad), "--home", str(home), "synth-data"]) == 2
    assert capsys.readouterr().err.startswith("error E_CONFIG:")
    assert run(home, "--set", "nope.key=1", "synth-data") == 2
    assert "E_CONFIG" in capsys.readouterr().err


def test_protocol_error_code():
    from reactgen.runtime import ProtocolViolation
    assert cli.error_code(ProtocolViolation("x")) == "E_PROTOCOL"
    assert cli.error_code(FileNotFoundError("x")) == "E_IO"
    assert cli.error_code(KeyError("x")) == "E_INTERNAL"


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "reactgen.cli", "--help"], capture_output=True,
                       text=True)
    assert r.returncode == 0 and "synth-data" in r.stdout
