"""Static SVG figures with their data tables embedded as XML comments."""
from __future__ import annotations

import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# stable element ids so identical data gives identical bytes
matplotlib.rcParams["svg.hashsalt"] = "zshot"
matplotlib.rcParams["svg.fonttype"] = "none"

SEEN_COLOR = "#4c72b0"
UNSEEN_COLOR = "#dd8452"


def _table(header, rows) -> str:
    lines = [",".join(str(h) for h in header)]
    for r in rows:
        lines.append(",".join(f"{v:.6g}" if isinstance(v, (float, np.floating)) else str(v) for v in r))
    # "--" may not appear inside an XML comment
    return "\n".join(lines).replace("--", "- -")


def _save(fig, path, header, rows) -> Path:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    svg = buf.getvalue()
    comment = f"<!-- data\n{_table(header, rows)}\n-->\n"
    cut = svg.find("<svg")
    svg = svg[:cut] + comment + svg[cut:]
    path = Path(path)
    path.write_text(svg, encoding="utf-8")
    return path


def per_class_iou(path, names, iou, unseen, title: str = "per-class IoU") -> Path:
    """Bar chart of per-class IoU (percent); unseen classes highlighted."""
    iou = np.nan_to_num(np.asarray(iou, dtype=float), nan=0.0) * 100
    unseen = set(int(c) for c in unseen)
    colors = [UNSEEN_COLOR if i in unseen else SEEN_COLOR for i in range(len(names))]
    fig, ax = plt.subplots(figsize=(6.4, 3.2))
    ax.bar(np.arange(len(names)), iou, color=colors)
    ax.set_xticks(np.arange(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("IoU (%)")
    ax.set_ylim(0, 100)
    ax.set_title(title)
    handles = [plt.Rectangle((0, 0), 1, 1, color=SEEN_COLOR), plt.Rectangle((0, 0), 1, 1, color=UNSEEN_COLOR)]
    ax.legend(handles, ["seen", "unseen"], frameon=False, loc="upper right")
    fig.tight_layout()
    rows = [(n, "unseen" if i in unseen else "seen", float(v)) for i, (n, v) in enumerate(zip(names, iou))]
    return _save(fig, path, ("class", "split", "iou_percent"), rows)


def lgp_distributions(path, names, visual, semantic) -> Path:
    """Per-class mean prototype weights, visual (top) against semantic (bottom)."""
    visual = np.asarray(visual, dtype=float)
    semantic = np.asarray(semantic, dtype=float)
    vmax = float(max(visual.max(initial=0), semantic.max(initial=0))) or 1.0
    fig, axes = plt.subplots(2, 1, figsize=(6.4, 4.8), sharex=True)
    for ax, mat, label in ((axes[0], visual, "visual"), (axes[1], semantic, "semantic")):
        im = ax.imshow(mat, aspect="auto", cmap="viridis", vmin=0, vmax=vmax, interpolation="nearest")
        ax.set_yticks(np.arange(len(names)))
        ax.set_yticklabels(names, fontsize=7)
        ax.set_title(f"{label} LGP weights", fontsize=9)
    axes[1].set_xlabel("prototype")
    fig.colorbar(im, ax=axes, shrink=0.8)
    rows = []
    for kind, mat in (("visual", visual), ("semantic", semantic)):
        for n, r in zip(names, mat):
            rows.append((kind, n, *[float(v) for v in r]))
    header = ("kind", "class", *[f"w{j}" for j in range(visual.shape[1])])
    return _save(fig, path, header, rows)


def ablation_bars(path, labels, means, stds, metric: str = "unseen mIoU (%)") -> Path:
    """Mean +- std per variant."""
    means = np.asarray(means, dtype=float)
    stds = np.asarray(stds, dtype=float)
    fig, ax = plt.subplots(figsize=(6.4, 3.2))
    x = np.arange(len(labels))
    ax.bar(x, means, yerr=stds, color=SEEN_COLOR, capsize=3)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel(metric)
    fig.tight_layout()
    rows = [(lab, float(m), float(s)) for lab, m, s in zip(labels, means, stds)]
    return _save(fig, path, ("variant", "mean", "std"), rows)
