"""Hot numeric kernels: antialiased resize, tie-aware ranking, F1 threshold sweep.

Every kernel has a numba implementation and a numpy implementation with the
same contract. The public names dispatch on ``_accel.USE_NUMBA``.
"""
import numpy as np

from ._accel import USE_NUMBA, njit

__all__ = [
    "resize_taps",
    "resize_image",
    "resize_image_numpy",
    "resize_image_numba",
    "midranks",
    "midranks_numpy",
    "midranks_numba",
    "f1_sweep",
    "f1_sweep_numpy",
    "f1_sweep_numba",
]


# ---------------------------------------------------------------- resize


def resize_taps(in_size, out_size):
    """Triangle-filter taps for one axis (half-pixel centres, antialiased).

    When downscaling, the filter support widens with the scale factor so every
    input pixel contributes, as PIL's bilinear filter does.

    Returns ``(index, weight)`` arrays of shape ``(out_size, ntaps)``; rows of
    ``weight`` sum to one and ``index`` is clipped into ``[0, in_size)``.
    """
    if in_size <= 0 or out_size <= 0:
        raise ValueError("sizes must be positive")
    scale = in_size / out_size
    support = max(scale, 1.0)
    centers = (np.arange(out_size, dtype=np.float64) + 0.5) * scale
    lo = np.floor(centers - support).astype(np.int64)
    ntaps = int(np.ceil(2 * support)) + 2
    index = lo[:, None] + np.arange(ntaps, dtype=np.int64)[None, :]
    dist = (index + 0.5 - centers[:, None]) / support
    weight = np.clip(1.0 - np.abs(dist), 0.0, None)
    weight[(index < 0) | (index >= in_size)] = 0.0
    weight /= weight.sum(axis=1, keepdims=True)
    return np.clip(index, 0, in_size - 1), weight


def resize_image_numpy(image, out_h, out_w):
    """Separable antialiased bilinear resize of an ``H x W x C`` array."""
    image = np.asarray(image, dtype=np.float64)
    iy, wy = resize_taps(image.shape[0], out_h)
    ix, wx = resize_taps(image.shape[1], out_w)
    rows = np.zeros((out_h, image.shape[1], image.shape[2]))
    for t in range(iy.shape[1]):
        rows += wy[:, t, None, None] * image[iy[:, t]]
    out = np.zeros((out_h, out_w, image.shape[2]))
    for t in range(ix.shape[1]):
        out += wx[None, :, t, None] * rows[:, ix[:, t]]
    return out.astype(np.float32)


@njit
def _resize_kernel(image, iy, wy, ix, wx):
    in_h, in_w, c = image.shape
    out_h, ty = iy.shape
    out_w, tx = ix.shape
    rows = np.zeros((out_h, in_w, c))
    for o in range(out_h):
        for t in range(ty):
            w = wy[o, t]
            if w == 0.0:
                continue
            src = iy[o, t]
            for x in range(in_w):
                for ch in range(c):
                    rows[o, x, ch] += w * image[src, x, ch]
    out = np.zeros((out_h, out_w, c), dtype=np.float32)
    for o in range(out_h):
        for p in range(out_w):
            for ch in range(c):
                acc = 0.0
                for t in range(tx):
                    acc += wx[p, t] * rows[o, ix[p, t], ch]
                out[o, p, ch] = acc
    return out


def resize_image_numba(image, out_h, out_w):
    image = np.ascontiguousarray(image, dtype=np.float64)
    iy, wy = resize_taps(image.shape[0], out_h)
    ix, wx = resize_taps(image.shape[1], out_w)
    return _resize_kernel(image, iy, wy, ix, wx)


# ---------------------------------------------------------------- ranks


def midranks_numpy(values):
    """1-based ranks with ties sharing their mean rank."""
    values = np.asarray(values, dtype=np.float64)
    _, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    mean_rank = upper - (counts - 1) / 2.0
    return mean_rank[inverse.reshape(-1)]


@njit
def _midranks_kernel(values):
    n = values.shape[0]
    order = np.argsort(values)  # stability not needed: ties are grouped by equality
    ranks = np.empty(n)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and values[order[j + 1]] == values[order[i]]:
            j += 1
        r = 0.5 * (i + j) + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = r
        i = j + 1
    return ranks


def midranks_numba(values):
    return _midranks_kernel(np.ascontiguousarray(values, dtype=np.float64))


# ---------------------------------------------------------------- F1 sweep


def _group_counts_numpy(scores, labels):
    """Positive/negative counts per unique score, highest score first."""
    uniq, inverse = np.unique(scores, return_inverse=True)
    inverse = inverse.reshape(-1)
    pos = np.bincount(inverse, weights=labels, minlength=uniq.size)
    tot = np.bincount(inverse, minlength=uniq.size).astype(np.float64)
    return uniq[::-1], pos[::-1], (tot - pos)[::-1]


def f1_sweep_numpy(scores, labels):
    """Best-F1 threshold over midpoints of sorted unique scores plus +-inf.

    A record is predicted positive when ``score >= threshold``. Ties in F1 go
    to the lower threshold. Returns ``(threshold, f1, accuracy)``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    uniq, pos, neg = _group_counts_numpy(scores, labels)
    n_pos, n = labels.sum(), labels.size
    tp = np.concatenate([[0.0], np.cumsum(pos)])
    fp = np.concatenate([[0.0], np.cumsum(neg)])
    f1 = np.where(tp > 0, 2 * tp / np.maximum(tp + fp + n_pos, 1e-300), 0.0)
    acc = (tp + (n - n_pos - fp)) / n
    best = f1.max()
    k = int(np.flatnonzero(f1 >= best - 1e-12)[-1])
    return _threshold_at(uniq, k), float(f1[k]), float(acc[k])


def _threshold_at(uniq_desc, k):
    m = uniq_desc.size
    if k == 0:
        return float("inf")
    if k == m:
        return float("-inf")
    return float(0.5 * (uniq_desc[k - 1] + uniq_desc[k]))


@njit
def _f1_sweep_kernel(scores, labels):
    n = scores.shape[0]
    order = np.argsort(-scores)
    n_pos = 0.0
    for i in range(n):
        n_pos += labels[i]
    tp = 0.0
    fp = 0.0
    best_k = 0
    best_f1 = 0.0
    best_acc = (n - n_pos) / n
    k = 0
    i = 0
    while i < n:
        j = i
        while j < n and scores[order[j]] == scores[order[i]]:
            if labels[order[j]] > 0.5:
                tp += 1.0
            else:
                fp += 1.0
            j += 1
        k += 1
        f1 = 2.0 * tp / (tp + fp + n_pos) if tp > 0 else 0.0
        if f1 >= best_f1 - 1e-12:
            best_f1 = max(best_f1, f1)
            best_k = k
            best_acc = (tp + (n - n_pos - fp)) / n
        i = j
    return best_k, best_f1, best_acc


def f1_sweep_numba(scores, labels):
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    labels = np.ascontiguousarray(labels, dtype=np.float64)
    k, f1, acc = _f1_sweep_kernel(scores, labels)
    return _threshold_at(np.unique(scores)[::-1], k), float(f1), float(acc)


if USE_NUMBA:
    resize_image = resize_image_numba
    midranks = midranks_numba
    f1_sweep = f1_sweep_numba
else:
    resize_image = resize_image_numpy
    midranks = midranks_numpy
    f1_sweep = f1_sweep_numpy
