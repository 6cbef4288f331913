import math

import numpy as np
import pytest

from lde.expansion import (ClassifierHead, DomainStats, LossConfig, analytic_lde_ce, ce_hessian_trace, loss_terms,
                           mc_expanded_ce, sample_directions, total_loss, triplet_loss, update_domain_stats)
from lde.numcore import NumericError, Rng, Tensor, cross_entropy, finite_diff_check, parameter


def symmetric_head():
    return ClassifierHead(Tensor(np.eye(2)), Tensor(np.zeros(2)))


# -- domain statistics ------------------------------------------------------

def test_stats_single_vector():
    st = update_domain_stats(DomainStats(0, 2), np.array([[1.0, 1.0]]))
    assert st.count == 1
    np.testing.assert_array_equal(st.mean, [1.0, 1.0])
    np.testing.assert_array_equal(st.covariance, np.zeros((2, 2)))


def test_stats_two_symmetric_points():
    st = update_domain_stats(DomainStats(0, 2), np.array([[0.0, 0.0], [2.0, 2.0]]))
    np.testing.assert_array_equal(st.mean, [1.0, 1.0])
    np.testing.assert_array_equal(st.covariance, np.ones((2, 2)))


def test_stats_chunked_equals_one_shot():
    r = Rng(0)
    x = r.normal((1000, 5)) * np.arange(1, 6) + 10.0
    st = DomainStats(0, 5)
    for chunk in np.array_split(x, 10):
        update_domain_stats(st, chunk)
    ref = np.cov(x.T, bias=True)
    assert np.linalg.norm(st.covariance - ref) / np.linalg.norm(ref) < 1e-8
    assert np.allclose(st.mean, x.mean(axis=0), rtol=1e-12)
    assert np.array_equal(st.scatter, st.scatter.T)


def test_stats_reject_wrong_width():
    with pytest.raises(ValueError, match="domain 3"):
        update_domain_stats(DomainStats(3, 4), np.zeros((2, 5)))


# -- sampling -------------------------------------------------------------------

def test_sample_directions_degenerate_cases():
    assert not sample_directions(np.zeros((3, 3)), 1.0, 50, Rng(0)).any()
    assert not sample_directions(np.eye(3), 0.0, 50, Rng(0)).any()


def test_sample_directions_covariance():
    xi = sample_directions(np.diag([1.0, 4.0]), 1.0, 100_000, Rng(1))
    emp = np.cov(xi.T)
    assert abs(emp[0, 0] - 1) < 0.05 and abs(emp[1, 1] - 4) < 0.2
    assert abs(emp[0, 1]) < 0.05 * 2  # zero target: 5% of the geometric scale sqrt(1*4)


# -- Hessian trace ----------------------------------------------------------------

def test_trace_symmetric_example():
    assert ce_hessian_trace(np.zeros(2), symmetric_head(), np.eye(2)).item() == pytest.approx(0.5, abs=1e-15)
    assert ce_hessian_trace(np.zeros(2), symmetric_head(), np.zeros((2, 2))).item() == 0.0


def test_trace_matches_finite_difference_hessian():
    r = Rng(2)
    D, M = 5, 4
    W, b, f = r.normal((M, D)), r.normal(M), r.normal(D)
    A = r.normal((D, D))
    cov = A @ A.T / D
    head = ClassifierHead(Tensor(W), Tensor(b))

    def ce(v):
        return cross_entropy(Tensor(v[None] @ W.T + b), [1]).item()

    h = 1e-4
    H = np.zeros((D, D))
    E = np.eye(D) * h
    for i in range(D):
        for j in range(D):
            H[i, j] = (ce(f + E[i] + E[j]) - ce(f + E[i] - E[j]) - ce(f - E[i] + E[j]) + ce(f - E[i] - E[j])) / (4 * h * h)
    ref = np.trace(cov @ H)
    assert abs(ce_hessian_trace(f, head, cov).item() - ref) / abs(ref) < 1e-4


def test_trace_gradient():
    r = Rng(3)
    W, b, f = parameter(r.normal((3, 4))), parameter(r.normal(3)), parameter(r.normal((2, 4)))
    A = r.normal((4, 4))
    head = ClassifierHead(W, b)
    rep = finite_diff_check(lambda: ce_hessian_trace(f, head, A @ A.T).sum(), [W, b, f], tol=1e-6)
    assert rep.passed, rep.per_param


# -- analytic vs Monte-Carlo -------------------------------------------------------

def test_analytic_symmetric_example():
    val = analytic_lde_ce(np.zeros((1, 2)), [0], [0], symmetric_head(), {0: np.eye(2)}, 1.0).item()
    assert val == pytest.approx(math.log(2) + 0.25, abs=1e-14)
    assert val == pytest.approx(0.9431, abs=5e-5)


def test_analytic_lambda_zero_is_mean_ce():
    r = Rng(4)
    f, y = r.normal((6, 3)), r.integers(0, 4, 6)
    head = ClassifierHead(Tensor(r.normal((4, 3))), Tensor(r.normal(4)))
    ref = cross_entropy(head(Tensor(f)), y).item()
    got = analytic_lde_ce(f, y, np.zeros(6, dtype=int), head, {0: np.eye(3)}, 0.0).item()
    assert abs(got - ref) < 1e-12


def test_batch_is_domain_balanced():
    r = Rng(5)
    f, y = r.normal((5, 3)), r.integers(0, 2, 5)
    head = ClassifierHead(Tensor(r.normal((2, 3))), Tensor(np.zeros(2)))
    dom = np.array([0, 0, 0, 0, 1])
    ce = cross_entropy(head(Tensor(f)), y, reduction="none").data
    got = analytic_lde_ce(f, y, dom, head, {}, 0.0).item()
    assert got == pytest.approx(0.5 * ce[:4].mean() + 0.5 * ce[4], abs=1e-14)


def test_mc_lambda_zero_equals_ce_for_any_K():
    r = Rng(6)
    f, y = r.normal((3, 2)), np.array([0, 1, 1])
    ref = analytic_lde_ce(f, y, [0, 0, 0], symmetric_head(), {0: np.eye(2)}, 0.0).item()
    for K in (1, 7):
        assert mc_expanded_ce(f, y, [0, 0, 0], symmetric_head(), {0: np.eye(2)}, 0.0, K, Rng(0)).value == \
            pytest.approx(ref, abs=1e-14)


def test_mc_is_reproducible():
    args = (np.zeros((1, 2)), [0], [0], symmetric_head(), {0: np.eye(2)}, 1.0, 1)
    assert mc_expanded_ce(*args, Rng(9)).value == mc_expanded_ce(*args, Rng(9)).value


def test_mc_symmetric_example_within_three_se():
    mc = mc_expanded_ce(np.zeros((1, 2)), [0], [0], symmetric_head(), {0: 0.1 * np.eye(2)}, 1.0, 100_000, Rng(10))
    ana = analytic_lde_ce(np.zeros((1, 2)), [0], [0], symmetric_head(), {0: 0.1 * np.eye(2)}, 1.0).item()
    assert abs(mc.value - ana) <= 3 * mc.stderr


def test_mc_error_shrinks_quadratically_with_scale():
    r = Rng(11)
    W, b = r.normal((3, 4)) / 2, 0.1 * r.normal(3)
    head = ClassifierHead(Tensor(W), Tensor(b))
    f, y, dom = r.normal((2, 4)), np.array([0, 2]), np.array([0, 1])
    A = r.normal((4, 4))
    base = {0: 0.1 * A @ A.T / 4, 1: 0.05 * np.eye(4)}
    errs = []
    for s in (1.0, 0.1, 0.01):
        covs = {k: s * v for k, v in base.items()}
        mc = mc_expanded_ce(f, y, dom, head, covs, 1.0, 100_000, Rng(12), sampling="moment_matched")
        errs.append(abs(mc.value - analytic_lde_ce(f, y, dom, head, covs, 1.0).item()))
    assert errs[0] > errs[1] > errs[2]
    assert 25 <= errs[1] / errs[2] <= 400


def test_warm_up_skips_sparse_domains():
    head = symmetric_head()
    st = update_domain_stats(DomainStats(0, 2), np.array([[0.0, 0.0], [2.0, 0.0]]))
    ce_only = analytic_lde_ce(np.zeros((1, 2)), [0], [0], head, [st], 1.0).item()
    assert ce_only == pytest.approx(math.log(2))
    assert analytic_lde_ce(np.zeros((1, 2)), [0], [0], head, [st], 1.0, min_count=2).item() > ce_only


def test_exclude_own_domain():
    head = symmetric_head()
    covs = {0: np.eye(2), 1: 2 * np.eye(2)}
    own = analytic_lde_ce(np.zeros((1, 2)), [0], [0], head, covs, 1.0).item()
    other = analytic_lde_ce(np.zeros((1, 2)), [0], [0], head, covs, 1.0, exclude_own_domain=True).item()
    assert own == pytest.approx(math.log(2) + 0.75)
    assert other == pytest.approx(math.log(2) + 0.5)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_features_name_the_sample():
    f = np.zeros((3, 2))
    f[2, 0] = np.inf
    with pytest.raises(NumericError, match="sample 2"):
        analytic_lde_ce(f, [0, 1, 0], [0, 0, 0], symmetric_head(), {}, 1.0)


# -- triplet / total --------------------------------------------------------------

def test_triplet_examples():
    assert triplet_loss(np.array([0.0, 1.0, 5.0]), ["A", "A", "B"]).item() == 0.0
    assert triplet_loss(np.array([0.0, 1.0, 1.2]), ["A", "A", "B"]).item() == pytest.approx(0.6)
    same = np.zeros((4, 3))
    assert triplet_loss(same, [0, 0, 1, 1], margin=0.7).item() == pytest.approx(0.7)


def test_triplet_needs_a_valid_anchor():
    with pytest.raises(ValueError):
        triplet_loss(np.zeros((2, 2)), [0, 1])


def test_total_loss_reduces_to_ce():
    r = Rng(13)
    f = np.concatenate([np.zeros((2, 3)), 10 + np.zeros((2, 3))])
    y = np.array([0, 0, 1, 1])
    head = ClassifierHead(Tensor(r.normal((2, 3))), Tensor(np.zeros(2)))
    cfg = LossConfig(lam=0.0, triplet_margin=0.3)
    ref = cross_entropy(head(Tensor(f)), y).item()
    assert total_loss(f, y, np.zeros(4, dtype=int), head, {0: np.eye(3)}, cfg).item() == pytest.approx(ref, abs=1e-12)


def test_total_exceeds_each_positive_term():
    r = Rng(14)
    f, y = r.normal((4, 3)), np.array([0, 0, 1, 1])
    head = ClassifierHead(Tensor(r.normal((2, 3))), Tensor(np.zeros(2)))
    t = loss_terms(f, y, np.array([0, 1, 0, 1]), head, {0: np.eye(3), 1: np.eye(3)},
                   LossConfig(lam=1.0, triplet_margin=0.3))
    parts = [t["ce"].item(), t["trace_term"].item(), t["triplet"].item()]
    assert all(p > 0 for p in parts)
    assert all(t["total"].item() > p for p in parts)


def test_total_loss_gradient():
    r = Rng(15)
    f = parameter(r.normal((6, 4)))
    W, b = parameter(r.normal((3, 4))), parameter(r.normal(3))
    y, dom = np.array([0, 0, 1, 1, 2, 2]), np.array([0, 1, 0, 1, 0, 1])
    A = r.normal((4, 4))
    covs = {0: A @ A.T / 4, 1: 0.5 * np.eye(4)}
    rep = finite_diff_check(lambda: total_loss(f, y, dom, ClassifierHead(W, b), covs, LossConfig()), [f, W, b],
                            tol=1e-5)
    assert rep.passed, rep.per_param
