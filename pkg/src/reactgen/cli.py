"""reactgen command line: synth-data | train-tokenizer | pretrain | finetune | evaluate |
react | sweep | ablate | plot."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time

import numpy as np

from reactgen import pipeline as pl

log = logging.getLogger("reactgen")


def _ws(args):
    overrides = dict(kv.split("=", 1) for kv in args.set or [])
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return pl.Workspace.from_file(args.config, args.home, overrides)


def _echo(rec):
    print(json.dumps(rec, sort_keys=True), file=sys.stderr, flush=True)


def cmd_synth_data(args):
    over = {}
    if args.classes:
        over["data.classes"] = json.dumps(args.classes.split(","))
    if args.samples_per_class:
        over["data.train_per_class"] = str(args.samples_per_class)
    args.set = (args.set or []) + [f"{k}={v}" for k, v in over.items()]
    if args.out:
        args.set.append(f"paths.data={args.out}")
    ws = _ws(args)
    ws.dump_config()
    print(json.dumps(pl.synth_data(ws), sort_keys=True))


def cmd_train_tokenizer(args):
    print(json.dumps(pl.train_tokenizer_stage(_ws(args), _echo), sort_keys=True))


def cmd_pretrain(args):
    ws = _ws(args)
    tasks = args.tasks.split(",") if args.tasks else None
    r = pl.pretrain_stage(ws, tasks, on_eval=_echo)
    print(json.dumps({"best_val": r["best_val"]}))


def cmd_finetune(args):
    r = pl.finetune_stage(_ws(args), think=not args.no_think, on_eval=_echo)
    print(json.dumps({"best_val": r["best_val"], "switched_at": r["switched_at"]}))


def cmd_evaluate(args):
    ws = _ws(args)
    pl.matcher_stage(ws, log_fn=_echo)
    rows = pl.evaluate_stage(ws, tuple(args.arms.split(",")))
    if args.captions:
        pl.caption_report(ws)
    sys.stdout.write(pl.format_table(rows))


def cmd_ablate(args):
    rows = pl.ablate_stage(_ws(args), args.arm)
    sys.stdout.write(pl.format_table(rows))


def cmd_sweep(args):
    rows = pl.sweep_stage(_ws(args), args.kind)
    for r in rows:
        print(json.dumps(r, sort_keys=True))


def _read_frames(src):
    """Frames from a binary motion file, or JSON lines (one 22x3 list per line) on stdin."""
    from reactgen.motion import MotionSequence, load_motion
    if src != "-":
        seq = load_motion(src)
        yield from seq.frames
        return
    for line in sys.stdin:
        if line.strip():
            yield np.asarray(json.loads(line), dtype=float)


def cmd_react(args):
    """Stream action frames; emit caption-change and reaction-frame records."""
    from reactgen.lm import load_checkpoint
    from reactgen.runtime import ReactionStream, RethinkPolicy
    from reactgen.motion import MotionSequence
    from reactgen.tasks import Builder, load_templates

    ws = _ws(args)
    vocab, tok = pl.load_vocab(ws), pl.load_tokenizer(ws)
    model, _ = load_checkpoint(ws.need(ws.path("checkpoints", "finetune.pt"), "finetune"))
    interval = math.inf if args.interval in ("inf", "0") else int(args.interval)
    mode = "gt" if args.caption else "think"
    stream = ReactionStream(model, vocab, Builder(vocab, load_templates()),
                            RethinkPolicy(interval), mode, args.caption, ws.seed)
    out = open(args.out, "w") if args.out else sys.stdout
    rate = tok.cfg.downsample
    frames, n_tokens, last_caption = [], 0, None
    emit = lambda **r: out.write(json.dumps(r, sort_keys=True) + "\n")
    for f in _read_frames(args.input):
        if args.realtime:
            time.sleep(1.0 / args.fps)
        frames.append(f)
        if len(frames) == 1:
            space, _ = tok.tokenize(MotionSequence(np.repeat(frames[0][None], rate, 0), args.fps))
            for ch, k in zip("xzr", space.as_tuple()):
                stream.on_action_token(vocab.space_id(ch, k))
        if len(frames) % rate:
            continue
        pose = tok.encode_pose([MotionSequence(np.stack(frames), args.fps)])[0]
        for p in pose[n_tokens:]:
            stream.on_action_token(vocab.pose_id(p))
            n_tokens += 1
            st = stream.state
            if st.caption != last_caption:
                last_caption = st.caption
                emit(token_index=n_tokens, event="caption", payload=st.caption)
            recon = tok.detokenize(st.reaction_space, st.reaction_pose, args.fps)
            emit(token_index=n_tokens, event="reaction_frames",
                 payload=np.round(recon.frames[-rate:], 4).tolist())
    st = stream.state
    report = {"thinks": st.thinks, "aits_s": float(np.mean(st.latencies)) if st.latencies else None,
              "latencies_s": st.latencies, "flagged": st.flagged, "repairs": st.repairs}
    if args.report:
        with open(args.report, "w") as f:
            json.dump(report, f, indent=1)
    if out is not sys.stdout:
        out.close()


def cmd_plot(args):
    from reactgen.plots import render_all
    for p in render_all(_ws(args), sample=args.sample):
        print(p)


def build_parser():
    p = argparse.ArgumentParser(prog="reactgen", description=__doc__.split("\n")[0])
    p.add_argument("--config", help="YAML run config (needs a version field)")
    p.add_argument("--home", help=f"workspace root (default ${pl.HOME_ENV} or cwd)")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config value, e.g. pretrain.steps=500")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data")
    s.add_argument("--classes", help="comma separated class names")
    s.add_argument("--samples-per-class", type=int)
    s.add_argument("--out", help="data directory (relative to the workspace)")
    s.set_defaults(fn=cmd_synth_data)

    sub.add_parser("train-tokenizer").set_defaults(fn=cmd_train_tokenizer)

    s = sub.add_parser("pretrain")
    s.add_argument("--tasks", help="subset of M2T,T2M,P2S,S2P,MM")
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("finetune")
    s.add_argument("--no-think", action="store_true", help="reacting only, no captions")
    s.set_defaults(fn=cmd_finetune)

    s = sub.add_parser("evaluate")
    s.add_argument("--arms", default="real,shuffled,full")
    s.add_argument("--captions", action="store_true", help="also write captioning metrics")
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("react")
    s.add_argument("--input", required=True, help="motion file, or - for JSON frames on stdin")
    s.add_argument("--interval", default="4", help="re-think interval in pose tokens (inf = once)")
    s.add_argument("--caption", help="fixed caption (disables thinking)")
    s.add_argument("--fps", type=int, default=30)
    s.add_argument("--realtime", action="store_true", help="sleep to simulate the frame rate")
    s.add_argument("--out", help="event file (default stdout)")
    s.add_argument("--report", help="episode report file")
    s.set_defaults(fn=cmd_react)

    s = sub.add_parser("sweep")
    s.add_argument("kind", choices=["rethink", "fps"])
    s.set_defaults(fn=cmd_sweep)

    s = sub.add_parser("ablate")
    s.add_argument("arm", choices=sorted(pl.ABLATIONS))
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("plot")
    s.add_argument("--sample", type=int, default=0, help="test sample to animate")
    s.set_defaults(fn=cmd_plot)
    return p


def error_code(exc) -> str:
    from reactgen.lm import TrainingDivergence as LmDiv
    from reactgen.runtime import ProtocolViolation
    from reactgen.vqvae import TrainingDivergence as VqDiv, UntrainedTokenizerError
    if isinstance(exc, pl.PipelineError):
        return exc.code
    if isinstance(exc, ProtocolViolation):
        return "E_PROTOCOL"
    if isinstance(exc, (LmDiv, VqDiv)):
        return "E_DIVERGED"
    if isinstance(exc, UntrainedTokenizerError):
        return "E_UNTRAINED"
    if isinstance(exc, (FileNotFoundError, IsADirectoryError)):
        return "E_IO"
    return "E_INTERNAL"


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except Exception as exc:   # one machine-parsable line, nonzero exit
        if args.verbose:
            log.exception("command failed")
        msg = " ".join(str(exc).split())
        print(f"error {error_code(exc)}: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
