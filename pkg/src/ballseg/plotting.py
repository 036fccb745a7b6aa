"""SVG figures for evaluation reports. CSVs are the canonical output; these are for eyeballing."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "font.size": 8,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.2,
    "lines.markersize": 3,
    "figure.figsize": (4.2, 3.0),
    "svg.hashsalt": "ballseg",   # stable element ids so reruns write identical files
    "svg.fonttype": "none",
}

FPR_NOTE = "FPR = mean false candidates per scene (a count, may exceed 1)"


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def roc_figure(path, curves, title="ROC"):
    """``curves``: {label: [RocPoint, ...]}."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        for label, curve in curves.items():
            ax.plot([p.fpr for p in curve], [p.tpr for p in curve], label=str(label), drawstyle="steps-post")
        ax.set_xlabel("false positives per scene")
        ax.set_ylabel("detection rate (TPR)")
        ax.set_ylim(0, 1.02)
        ax.set_xlim(left=0)
        ax.set_title(title)
        ax.annotate(FPR_NOTE, (0.01, 0.01), xycoords="figure fraction", fontsize=6, color="0.4")
        ax.legend(loc="lower right")
        ax.grid(alpha=0.3)
        _save(fig, path)


def hits_figure(path, fractions, ks):
    """Histogram of per-scene hit percentages, one series per k; ``fractions`` is (scenes, len(ks))."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        bins = [i / 10 for i in range(11)]
        ax.hist([100 * fractions[:, j] for j in range(len(ks))], bins=[100 * b for b in bins],
                label=[f"top-{k}" for k in ks])
        ax.set_xlabel("% of random crops with the ball detected")
        ax.set_ylabel("scenes")
        ax.legend(loc="upper left")
        _save(fig, path)


def rate_figure(path, curves):
    """``curves``: {label: [(n, rate), ...]}."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        for label, curve in curves.items():
            ax.plot([n for n, _ in curve], [r for _, r in curve], marker="o", label=str(label))
        ax.set_xlabel("number of random crops")
        ax.set_ylabel("scenes detected in at least one crop")
        ax.set_ylim(0, 1.02)
        ax.legend(loc="lower right")
        ax.grid(alpha=0.3)
        _save(fig, path)


def bench_figure(path, results):
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        labels = [f"{r.shape[2]}x{r.shape[1]}x{r.shape[0]}" for r in results]
        xs = range(len(results))
        ax.bar(xs, [r.mean_fps for r in results], yerr=[r.std_fps for r in results], label="measured")
        refs = [(i, r.reference_fps) for i, r in enumerate(results) if r.reference_fps is not None]
        if refs:
            ax.scatter([i for i, _ in refs], [v for _, v in refs], marker="_", s=200, color="k",
                       label="published (GPU, context only)")
        ax.set_xticks(list(xs), labels)
        ax.set_ylabel("frames per second")
        ax.legend(loc="upper right")
        _save(fig, path)
