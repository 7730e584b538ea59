"""Static activation-space figures."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .maps import BEIGE, GREEN, PURPLE, percentile_bound  # noqa: E402


def _cmap():
    from matplotlib.colors import LinearSegmentedColormap

    return LinearSegmentedColormap.from_list("asos", [PURPLE / 255, BEIGE / 255, GREEN / 255])


def plot_activation_space(cloud, path, max_points=20000, seed=0):
    """Point cloud coloured by class: histogram for one channel, plane for two, 3-D scatter otherwise."""
    pts, lab = cloud.points, cloud.labels[cloud.sample_index]
    if len(pts) > max_points:
        keep = np.random.default_rng(seed).choice(len(pts), max_points, replace=False)
        pts, lab = pts[keep], lab[keep]
    n_m = pts.shape[1]
    fig = plt.figure(figsize=(6, 5))
    colors = {0: "tab:purple", 1: "tab:green"}
    names = {0: "anthropogenic", 1: "wild"}
    if n_m == 1:
        ax = fig.add_subplot()
        for c in (0, 1):
            ax.hist(pts[lab == c, 0], bins=40, range=(-1, 1), alpha=0.6, color=colors[c], label=names[c])
        ax.set_xlabel("channel 0")
        ax.set_ylabel("count")
    elif n_m == 2:
        ax = fig.add_subplot()
        for c in (0, 1):
            sel = lab == c
            ax.scatter(pts[sel, 0], pts[sel, 1], s=2, alpha=0.5, color=colors[c], label=names[c])
        ax.set_xlim(-1, 1)
        ax.set_ylim(-1, 1)
        ax.set_xlabel("channel 0")
        ax.set_ylabel("channel 1")
    else:
        ax = fig.add_subplot(projection="3d")
        for c in (0, 1):
            sel = lab == c
            ax.scatter(pts[sel, 0], pts[sel, 1], pts[sel, 2], s=2, alpha=0.5, color=colors[c], label=names[c])
        for setter in (ax.set_xlim, ax.set_ylim, ax.set_zlim):
            setter(-1, 1)
        ax.set_xlabel("channel 0")
        ax.set_ylabel("channel 1")
        ax.set_zlabel("channel 2")
    ax.legend(loc="upper right")
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)


def plot_sensitivities(index, path, percentile=98.0):
    """Cube centres of determined cubes coloured by sensitivity."""
    det = ~index.undetermined
    coords = np.argwhere(det)
    centres = -1.0 + (coords + 0.5) * index.l_cube
    eta = index.eta[det]
    bound = percentile_bound(eta, q=percentile) or 1.0
    fig = plt.figure(figsize=(6, 5))
    kw = dict(c=eta, cmap=_cmap(), vmin=-bound, vmax=bound)
    if index.n_m == 1:
        ax = fig.add_subplot()
        sc = ax.scatter(centres[:, 0], np.zeros(len(centres)), **kw)
        ax.set_xlim(-1, 1)
    elif index.n_m == 2:
        ax = fig.add_subplot()
        sc = ax.scatter(centres[:, 0], centres[:, 1], s=20, **kw)
        ax.set_xlim(-1, 1)
        ax.set_ylim(-1, 1)
    else:
        ax = fig.add_subplot(projection="3d")
        sc = ax.scatter(centres[:, 0], centres[:, 1], centres[:, 2], s=20, **kw)
        for setter in (ax.set_xlim, ax.set_ylim, ax.set_zlim):
            setter(-1, 1)
    fig.colorbar(sc, ax=ax, label="sensitivity")
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
