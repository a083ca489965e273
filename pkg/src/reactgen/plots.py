"""Static figures: sweep curves and frame-by-frame skeleton projections."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from reactgen.motion import PARENTS


def _read_tsv(path):
    lines = Path(path).read_text().splitlines()
    hx, hy = lines[0].split("\t")
    xs, ys = zip(*[(float(a), float(b)) for a, b in (l.split("\t") for l in lines[1:])])
    return hx, hy, np.array(xs), np.array(ys)


def plot_curve(tsv, out, logx=False, title=None):
    hx, hy, x, y = _read_tsv(tsv)
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(x, y, "o-")
    if logx:
        ax.set_xscale("log", base=2)
    ax.set_xlabel(hx)
    ax.set_ylabel(hy)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def skeleton_frames(action, reaction, out_dir, every=4, prefix="frame"):
    """Side-view (x, y) projections of both persons, one PNG per ``every`` frames."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    both = np.concatenate([action.frames, reaction.frames], 1)
    lo, hi = both.min((0, 1)), both.max((0, 1))
    paths = []
    for i in range(0, action.num_frames, every):
        fig, ax = plt.subplots(figsize=(4, 3))
        for seq, color in ((action, "tab:blue"), (reaction, "tab:red")):
            f = seq.frames[i]
            for j, p in enumerate(PARENTS):
                if p >= 0:
                    ax.plot([f[j, 0], f[p, 0]], [f[j, 1], f[p, 1]], color=color, lw=1.5)
        ax.set_xlim(lo[0] - 0.2, hi[0] + 0.2)
        ax.set_ylim(0, hi[1] + 0.2)
        ax.set_aspect("equal")
        ax.set_title(f"frame {i}")
        path = out_dir / f"{prefix}_{i:04d}.png"
        fig.savefig(path, dpi=80)
        plt.close(fig)
        paths.append(path)
    return paths


def render_all(ws, sample: int = 0):
    """Every figure whose input data exists in the workspace."""
    rep = ws.path("reports")
    fig_dir = ws.path("reports", "figures")
    fig_dir.mkdir(parents=True, exist_ok=True)
    made = []
    if (rep / "sweep_rethink_fid.tsv").exists():
        made.append(plot_curve(rep / "sweep_rethink_fid.tsv", fig_dir / "rethink_fid.png", True))
    if (rep / "timing_sweep_rethink_aits.tsv").exists():
        made.append(plot_curve(rep / "timing_sweep_rethink_aits.tsv", fig_dir / "rethink_aits.png",
                               True))
    if (rep / "sweep_fps.tsv").exists():
        made.append(plot_curve(rep / "sweep_fps.tsv", fig_dir / "fps_gap.png"))
    from reactgen.pipeline import load_data
    test = load_data(ws, "test")
    s = test[sample]
    made += skeleton_frames(s.action, s.reaction, fig_dir / f"sample{sample}_real")
    return made
