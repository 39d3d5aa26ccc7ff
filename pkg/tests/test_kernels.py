import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from qadapt import kernels

sizes = st.integers(min_value=1, max_value=40)


def pil_resize(channel, out_h, out_w):
    im = Image.fromarray(np.asarray(channel, dtype=np.float32))
    return np.asarray(im.resize((out_w, out_h), Image.BILINEAR))


@pytest.mark.parametrize("shape,out", [((1024, 1024), (224, 224)), ((512, 300), (224, 100)),
                                       ((50, 60), (224, 224)), ((37, 41), (13, 7))])
def test_resize_matches_pillow_bilinear(shape, out, rng):
    image = rng.random(shape).astype(np.float32)
    ref = pil_resize(image, *out)
    for fn in (kernels.resize_image_numpy, kernels.resize_image_numba):
        got = fn(image[:, :, None], *out)[:, :, 0]
        np.testing.assert_allclose(got, ref, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(h=sizes, w=sizes, oh=sizes, ow=sizes, seed=st.integers(0, 2**16))
def test_resize_backends_agree(h, w, oh, ow, seed):
    image = np.random.default_rng(seed).random((h, w, 2))
    a = kernels.resize_image_numpy(image, oh, ow)
    b = kernels.resize_image_numba(image, oh, ow)
    assert a.shape == b.shape == (oh, ow, 2)
    np.testing.assert_allclose(a, b, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(n=sizes, m=sizes)
def test_resize_taps_are_normalized_and_in_range(n, m):
    index, weight = kernels.resize_taps(n, m)
    np.testing.assert_allclose(weight.sum(axis=1), 1.0)
    assert (weight >= 0).all()
    assert index.min() >= 0 and index.max() < n


@settings(max_examples=30, deadline=None)
@given(h=sizes, w=sizes, oh=sizes, ow=sizes, value=st.floats(0, 1))
def test_resize_preserves_constants(h, w, oh, ow, value):
    out = kernels.resize_image_numba(np.full((h, w, 3), value), oh, ow)
    np.testing.assert_allclose(out, value, atol=1e-6)


def test_resize_taps_rejects_empty_axes():
    with pytest.raises(ValueError):
        kernels.resize_taps(0, 4)


def brute_midranks(values):
    values = list(values)
    out = []
    for v in values:
        below = sum(u < v for u in values)
        equal = sum(u == v for u in values)
        out.append(below + (equal + 1) / 2.0)
    return np.array(out)


tie_prone = arrays(np.float64, st.integers(1, 60), elements=st.sampled_from([-2.0, -0.5, 0.0, 0.25, 1.0, 3.0]))
spread = arrays(np.float64, st.integers(1, 60), elements=st.floats(-1e6, 1e6))


@settings(max_examples=60, deadline=None)
@given(values=st.one_of(tie_prone, spread))
def test_midranks_match_pairwise_counts(values):
    ref = brute_midranks(values)
    np.testing.assert_allclose(kernels.midranks_numpy(values), ref)
    np.testing.assert_allclose(kernels.midranks_numba(values), ref)


def brute_best_f1(scores, labels):
    """Max F1 over every rule 'score >= t'; t ranges over each score and +inf."""
    n_pos = labels.sum()
    best = 0.0
    for t in [np.inf, *np.unique(scores)]:
        pred = scores >= t
        tp = float((pred & (labels > 0.5)).sum())
        fp = float((pred & (labels < 0.5)).sum())
        f1 = 2 * tp / (2 * tp + fp + (n_pos - tp)) if tp > 0 else 0.0
        best = max(best, f1)
    return best


def f1_at(scores, labels, threshold):
    pred = scores >= threshold
    tp = float((pred & (labels > 0.5)).sum())
    fp = float((pred & (labels < 0.5)).sum())
    fn = float((~pred & (labels > 0.5)).sum())
    acc = ((pred == (labels > 0.5)).sum()) / labels.size
    return (2 * tp / (2 * tp + fp + fn) if tp > 0 else 0.0), acc


@settings(max_examples=80, deadline=None)
@given(data=st.data())
def test_f1_sweep_is_exhaustive_optimum(data):
    n = data.draw(st.integers(2, 25))
    scores = np.asarray(data.draw(st.lists(st.sampled_from([0.0, 0.1, 0.2, 0.5, 0.7, 0.9, 1.3]), min_size=n,
                                           max_size=n)), dtype=np.float64)
    labels = np.asarray(data.draw(st.lists(st.sampled_from([0.0, 1.0]), min_size=n, max_size=n)))
    best = brute_best_f1(scores, labels)
    for fn in (kernels.f1_sweep_numpy, kernels.f1_sweep_numba):
        threshold, f1, acc = fn(scores, labels)
        assert f1 == pytest.approx(best, abs=1e-12)
        f1_check, acc_check = f1_at(scores, labels, threshold)
        assert f1_check == pytest.approx(f1, abs=1e-12)
        assert acc_check == pytest.approx(acc, abs=1e-12)


def test_f1_sweep_prefers_lowest_threshold_on_ties():
    # separable: the threshold sits midway between the classes
    scores = np.array([0.9, 0.8, 0.1, 0.1])
    labels = np.array([1.0, 1.0, 0.0, 0.0])
    thr, f1, _ = kernels.f1_sweep_numpy(scores, labels)
    assert (thr, f1) == (pytest.approx(0.45), 1.0)
    scores = np.array([0.9, 0.1])
    labels = np.array([1.0, 1.0])
    for fn in (kernels.f1_sweep_numpy, kernels.f1_sweep_numba):
        thr, f1, acc = fn(scores, labels)
        assert thr == -np.inf and f1 == 1.0 and acc == 1.0


def test_f1_sweep_without_positives_is_zero():
    # every threshold ties at F1 = 0, so the lowest one wins
    for fn in (kernels.f1_sweep_numpy, kernels.f1_sweep_numba):
        thr, f1, acc = fn(np.array([0.3, 0.2]), np.array([0.0, 0.0]))
        assert (thr, f1, acc) == (-np.inf, 0.0, 0.0)


@pytest.mark.parametrize("flag,expect", [("0", "numpy"), ("1", "numba")])
def test_env_flag_selects_backend(flag, expect):
    code = "from qadapt import kernels as k; print(k.resize_image.__name__, k.midranks.__name__, k.f1_sweep.__name__)"
    env = {**os.environ, "QADAPT_NUMBA": flag}
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, env=env, check=True).stdout
    assert out.split() == [f"resize_image_{expect}", f"midranks_{expect}", f"f1_sweep_{expect}"]
