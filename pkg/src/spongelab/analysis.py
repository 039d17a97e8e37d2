"""Uniformity, rank correlation, transferability and the synthetic image generator."""

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, ShapeError
from .validation import check_random_state, check_tensor


@dataclass(frozen=True)
class UniformityConfig:
    window: int = 8
    stride: int = 4

    def __post_init__(self):
        if int(self.window) < 1 or int(self.stride) < 1:
            raise ConfigError(f"window and stride must be >= 1, got {self.window}, {self.stride}")


def uniformity(image, cfg=UniformityConfig()):
    """Mean population std over every (channel, window) position.

    Windows tile with ``cfg.stride``; trailing partial windows are dropped.
    Lower means flatter.
    """
    img = check_tensor(image, ndim=3, name="image")
    w, s = cfg.window, cfg.stride
    if w > img.shape[1] or w > img.shape[2]:
        raise ConfigError(f"window {w} larger than image {img.shape[1]}x{img.shape[2]}")
    win = sliding_window_view(img, (w, w), axis=(1, 2))[:, ::s, ::s]
    # centre on one pixel of each window first so flat windows give exactly 0
    win = win - win[..., :1, :1]
    return float(win.std(axis=(-2, -1)).mean())


def _merge_count(seq):
    """Sort ``seq`` and return (sorted, number of strictly inverted pairs)."""
    n = len(seq)
    if n < 2:
        return list(seq), 0
    mid = n // 2
    left, inv_l = _merge_count(seq[:mid])
    right, inv_r = _merge_count(seq[mid:])
    merged = []
    swaps = inv_l + inv_r
    i = j = 0
    while i < len(left) and j < len(right):
        if right[j] < left[i]:
            merged.append(right[j])
            swaps += len(left) - i
            j += 1
        else:
            merged.append(left[i])
            i += 1
    merged.extend(left[i:])
    merged.extend(right[j:])
    return merged, swaps


def _tied_pairs(sorted_values):
    _, counts = np.unique(sorted_values, return_counts=True)
    return int((counts * (counts - 1) // 2).sum())


def kendall_tau(xs, ys):
    """Tie-corrected Kendall tau-b in O(n log n) (Knight's merge-sort method)."""
    x = np.asarray(xs, dtype=np.float64).ravel()
    y = np.asarray(ys, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise DataError(f"length mismatch: {x.size} vs {y.size}")
    n = x.size
    if n < 2:
        raise DataError("kendall_tau needs at least two observations")
    order = np.lexsort((y, x))
    x, y = x[order], y[order]
    n0 = n * (n - 1) // 2
    n1 = _tied_pairs(x)
    pairs = np.stack([x, y], axis=1)
    _, joint = np.unique(pairs, axis=0, return_counts=True)
    n3 = int((joint * (joint - 1) // 2).sum())
    sorted_y, swaps = _merge_count(y.tolist())
    n2 = _tied_pairs(np.asarray(sorted_y))
    denom = np.sqrt(float(n0 - n1) * float(n0 - n2))
    if denom == 0:
        raise DataError("kendall_tau is undefined when one argument is constant")
    return float((n0 - n1 - n2 + n3 - 2 * swaps) / denom)


def synth_dataset(n, shape=(3, 32, 32), uniformity_levels=(0.0, 0.02, 0.05, 0.1, 0.2, 0.35), seed=0):
    """Labelled stand-in for natural images.

    Each image is a random background plus 2-6 axis-aligned rectangles of
    random colour, with i.i.d. Gaussian texture at a drawn noise scale added
    on top and the result clipped to [0, 1]. The label is the index of the
    noise scale, so classes run from flat to busy.
    """
    if int(n) < 1:
        raise ConfigError("n must be >= 1")
    levels = [float(v) for v in uniformity_levels]
    if not levels or min(levels) < 0:
        raise ConfigError("uniformity_levels must be non-empty and non-negative")
    c, h, w = shape
    rng = check_random_state(seed)
    out = []
    for _ in range(int(n)):
        img = np.empty((c, h, w))
        img[:] = rng.random(c)[:, None, None]
        for _ in range(rng.integers(2, 7)):
            y0, y1 = np.sort(rng.integers(0, h + 1, size=2))
            x0, x1 = np.sort(rng.integers(0, w + 1, size=2))
            img[:, y0 : y1 + 1, x0 : x1 + 1] = rng.random(c)[:, None, None]
        label = int(rng.integers(len(levels)))
        noise = rng.standard_normal((c, h, w)) * levels[label]
        out.append((np.clip(img + noise, 0.0, 1.0), label))
    return out


@dataclass
class TransferMatrix:
    """Percent density increase of each source's sponges on each target over its baseline."""

    values: np.ndarray
    sources: list
    targets: list

    def entry(self, s, t):
        return float(self.values[s, t])


def transfer_matrix(models, sponge_sets, baselines, names=None, density=None):
    """``values[s, t] = 100 * (mean density of set s on model t - base_t) / base_t``.

    ``density`` is the per-image measurement, defaulting to
    :func:`spongelab.attack.query_density`.
    """
    if density is None:
        from .attack import query_density as density
    if len(baselines) != len(models):
        raise DataError("need one baseline per target model")
    names = list(names) if names is not None else [f"model{i}" for i in range(len(models))]
    out = np.empty((len(sponge_sets), len(models)))
    for t, m in enumerate(models):
        base = float(baselines[t])
        if not base > 0:
            raise DataError(f"baseline for target {t} must be positive")
        for s, images in enumerate(sponge_sets):
            if len(images) == 0:
                raise DataError(f"sponge set {s} is empty")
            dens = []
            for img in images:
                if np.shape(img) != tuple(m.arch.input_shape):
                    raise ShapeError(f"sponge of shape {np.shape(img)} does not fit target {t}")
                dens.append(density(m, img))
            out[s, t] = 100.0 * (float(np.mean(dens)) - base) / base
    return TransferMatrix(out, names[: len(sponge_sets)], names)


@dataclass
class StudyResult:
    uniformity: np.ndarray
    density: np.ndarray
    tau: float
    config: UniformityConfig

    def pairs(self):
        return list(zip(self.uniformity.tolist(), self.density.tolist()))


def density_uniformity_study(m, dataset, cfg=UniformityConfig(), density=None):
    """Measure (uniformity, density) per image and their Kendall tau."""
    if density is None:
        from .attack import query_density as density
    images = [item[0] if isinstance(item, tuple) else item for item in dataset]
    if not images:
        raise DataError("study dataset is empty")
    if len(images) < 2:
        raise DataError("kendall_tau needs at least two images")
    u = np.array([uniformity(img, cfg) for img in images])
    d = np.array([density(m, img) for img in images])
    return StudyResult(u, d, kendall_tau(u, d), cfg)
