"""Report figures. Everything renders off-screen with the Agg backend."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

# no timestamp or version in the PNG, so equal inputs give equal files
_PNG_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_roc(points, path, auc=None, title="ROC"):
    fpr = [p[0] for p in points]
    tpr = [p[1] for p in points]
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.plot(fpr, tpr, drawstyle="steps-post", color="tab:blue",
            label=f"AUC = {auc:.3f}" if auc is not None else None)
    ax.plot([0, 1], [0, 1], ls="--", color="0.6", lw=0.8)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(title)
    if auc is not None:
        ax.legend(loc="lower right")
    fig.tight_layout()
    return _save(fig, path)


def plot_loss(losses, path, title="training loss"):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(np.arange(1, len(losses) + 1), losses, color="tab:red")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean cross-entropy")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_preprocess(result, path, title=None):
    """Thumbnail with the tissue mask outline and the selected patches boxed."""
    thumb, mask = getattr(result.thumbnail, "pixels", result.thumbnail), result.mask
    fig, axes = plt.subplots(1, 2, figsize=(8, 4))
    axes[0].imshow(thumb)
    axes[1].imshow(mask.bits, cmap="gray", vmin=0, vmax=1)
    for ax in axes:
        for rec in result.selected:
            ax.add_patch(Rectangle((rec.x / mask.scale, rec.y / mask.scale), rec.size / mask.scale,
                                   rec.size / mask.scale, fill=False, ec="tab:green", lw=1.2))
        ax.set_xticks([])
        ax.set_yticks([])
    axes[0].set_title("thumbnail")
    axes[1].set_title("tissue mask")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_ablation(reports, path, keys=("accuracy", "auc", "f1")):
    """Grouped bars, one group per metric, one bar per selection mode."""
    modes = list(reports)
    x = np.arange(len(keys))
    width = 0.8 / max(len(modes), 1)
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for i, mode in enumerate(modes):
        vals = [getattr(reports[mode], k) or 0.0 for k in keys]
        ax.bar(x + (i - (len(modes) - 1) / 2) * width, vals, width, label=mode)
    ax.set_xticks(x)
    ax.set_xticklabels(keys)
    ax.set_ylim(0, 1.05)
    ax.legend()
    ax.set_title("patch selection")
    fig.tight_layout()
    return _save(fig, path)
