import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from qadapt.errors import MetricsError
from qadapt.metrics import MetricsReport, auc_score, f1_threshold_search, macro_auc
from qadapt.objective import multilabel_bce, report_auxiliary_loss, similarity_logits


def pair_auc(scores, labels):
    pos = scores[labels > 0.5]
    neg = scores[labels < 0.5]
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


@st.composite
def binary_problem(draw, max_n=40):
    n = draw(st.integers(2, max_n))
    labels = np.array(draw(st.lists(st.sampled_from([0, 1]), min_size=n, max_size=n)))
    scores = np.array(draw(st.lists(st.sampled_from([-1.0, 0.0, 0.3, 0.31, 2.0, 5.0]) | st.floats(-5, 5),
                                    min_size=n, max_size=n)))
    return scores, labels


@settings(max_examples=80, deadline=None)
@given(binary_problem())
def test_auc_equals_pair_counting(problem):
    scores, labels = problem
    got = auc_score(scores, labels)
    if labels.all() or not labels.any():
        assert got is None
    else:
        assert got == pytest.approx(pair_auc(scores, labels), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(binary_problem(), st.sampled_from(["affine", "cube", "exp", "atan"]))
def test_auc_invariant_under_increasing_maps(problem, name):
    scores, labels = problem
    fn = {"affine": lambda s: 3.0 * s - 7.0, "cube": lambda s: s ** 3 + s, "exp": np.exp, "atan": np.arctan}[name]
    mapped = fn(scores)
    # a strictly increasing map must not merge distinct floats for the check to be meaningful
    if len(np.unique(mapped)) != len(np.unique(scores)):
        return
    assert auc_score(mapped, labels) == auc_score(scores, labels)


def test_macro_auc_skips_one_sided_classes():
    scores = np.array([[0.9, 0.1], [0.2, 0.3], [0.4, 0.8]])
    labels = np.array([[1, 0], [0, 0], [0, 0]])
    per, mean, skipped = macro_auc(scores, labels, ["a", "b"])
    assert per == {"a": 1.0} and mean == 1.0 and skipped == ["b"]
    with pytest.raises(MetricsError):
        macro_auc(scores, np.zeros_like(labels))
    with pytest.raises(MetricsError):
        macro_auc(scores, labels[:2])


def test_report_text_round_trip(rng):
    scores = rng.random((60, 3))
    labels = (rng.random((60, 3)) < 0.4).astype(int)
    labels[:, 2] = 0
    report = MetricsReport.from_scores(scores, labels, ["x", "y y", "z"], extra={"gate_mean.A": "0.5"})
    assert report.skipped_classes == ["z"]
    again = MetricsReport.from_text(report.to_text())
    assert again == report
    assert again.same_metrics(report)
    assert 0 <= report.macro_auc <= 100 and 0 <= report.macro_f1 <= 100


def test_report_from_text_rejects_garbage():
    with pytest.raises(MetricsError):
        MetricsReport.from_text("auc = 3\n")
    with pytest.raises(MetricsError):
        MetricsReport.from_text("[class a]\nauc = 1\nf1 = 1\nacc = 1\nthreshold = 0\n")


def test_f1_search_matches_per_column(rng):
    scores = rng.random((30, 2))
    labels = (rng.random((30, 2)) < 0.5).astype(int)
    per, f1, acc = f1_threshold_search(scores, labels, ["a", "b"])
    assert f1 == pytest.approx(np.mean([per["a"][1], per["b"][1]]))
    assert acc == pytest.approx(np.mean([per["a"][2], per["b"][2]]))


# ---------------------------------------------------------------- objective


def naive_bce(s, y, exact=False):
    """-(y log p + (1-y) log(1-p)); ``exact`` evaluates it with 400 digits, enough for |s| <= 700."""
    if exact:
        with mpmath.workdps(400):
            p = 1 / (1 + mpmath.exp(-mpmath.mpf(s)))
            return float(-(y * mpmath.log(p) + (1 - y) * mpmath.log(1 - p)))
    p = 1.0 / (1.0 + math.exp(-s))
    return -(y * math.log(p) + (1 - y) * math.log(1 - p))


def stable_bce(s, y):
    return float(multilabel_bce(torch.tensor([[s]], dtype=torch.float64), torch.tensor([[y]], dtype=torch.float64)))


@settings(max_examples=200, deadline=None)
@given(st.floats(-12, 12), st.sampled_from([0.0, 1.0]))
def test_stable_bce_matches_naive(s, y):
    # beyond |s| ~ 15 the float64 naive form itself loses digits in log(1 - p)
    assert stable_bce(s, y) == pytest.approx(naive_bce(s, y), abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.floats(-700, 700), st.sampled_from([0.0, 1.0]))
def test_stable_bce_matches_high_precision_naive(s, y):
    assert stable_bce(s, y) == pytest.approx(naive_bce(s, y, exact=True), abs=1e-9, rel=1e-12)


def test_bce_is_finite_for_huge_logits():
    logits = torch.tensor([[1e4, -1e4, 0.0]], dtype=torch.float64)
    loss = multilabel_bce(logits, torch.tensor([[0.0, 1.0, 1.0]]))
    assert torch.isfinite(loss)
    assert float(loss) == pytest.approx((1e4 + 1e4 + math.log(2)) / 3)


def test_bce_per_record():
    logits = torch.zeros(4, 3)
    per = multilabel_bce(logits, torch.ones(4, 3), reduce=False)
    assert per.shape == (4,)
    torch.testing.assert_close(per, torch.full((4,), math.log(2)))


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 50), st.integers(0, 1000))
def test_similarity_logits_are_scaled_cosines(scale, seed):
    g = torch.Generator().manual_seed(seed)
    v = torch.randn(5, 7, generator=g, dtype=torch.float64)
    z = torch.randn(3, 7, generator=g, dtype=torch.float64)
    got = similarity_logits(v, z, scale)
    ref = scale * torch.nn.functional.cosine_similarity(v[:, None], z[None], dim=-1)
    torch.testing.assert_close(got, ref, atol=1e-6 * scale, rtol=1e-6)
    assert (got.abs() <= scale + 1e-9).all()


def test_report_loss_zero_without_reports():
    z = torch.randn(3, 4)
    loss = report_auxiliary_loss(None, z, torch.zeros(2, 3), torch.tensor([False, False]))
    assert float(loss) == 0.0


def test_report_loss_uses_masked_targets():
    z = torch.randn(3, 4, dtype=torch.float64)
    emb = torch.randn(1, 4, dtype=torch.float64)
    targets = torch.tensor([[1.0, 0, 0], [0, 1.0, 1.0]], dtype=torch.float64)
    mask = torch.tensor([False, True])
    got = report_auxiliary_loss(emb, z, targets, mask)
    torch.testing.assert_close(got, multilabel_bce(similarity_logits(emb, z), targets[1:]))
