import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmadapter import autodiff as ad
from dmadapter.autodiff import Parameter, Tensor
from dmadapter.gradcheck import grad_check
from dmadapter.moe import AdapterExpert, DomainRouter, load_balance_loss, sma_forward
from dmadapter.objectives import (ContractError, SdmConfig, match_distribution, sdm_bidirectional,
                                  sdm_i2t, total_loss)


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def loop_oracle(V, T, q, tau, eps):
    """Scalar double loop over the KL form of the matching loss."""
    n = V.shape[0]
    total = 0.0
    for i in range(n):
        logits = [sum(V[i, k] * T[j, k] for k in range(V.shape[1])) / tau for j in range(n)]
        top = max(logits)
        z = sum(math.exp(s - top) for s in logits)
        for j in range(n):
            p = math.exp(logits[j] - top) / z
            if p > 0:
                total += p * math.log(p / (q[i][j] + eps))
    return total / n


def test_match_distribution_examples():
    np.testing.assert_array_equal(match_distribution([1, 2, 3]), np.eye(3))
    np.testing.assert_array_equal(match_distribution([7, 7]), [[0.5, 0.5], [0.5, 0.5]])
    q = match_distribution([1, 1, 2])
    assert q[0].tolist() == [0.5, 0.5, 0.0] and q[2].tolist() == [0.0, 0.0, 1.0]


@given(st.lists(st.integers(0, 3), min_size=1, max_size=10))
def test_match_distribution_rows_are_distributions(ids):
    q = match_distribution(ids)
    np.testing.assert_allclose(q.sum(axis=1), 1.0)
    assert np.all(np.diag(q) > 0)


@given(st.integers(0, 2**31), st.integers(1, 8))
@settings(max_examples=30)
def test_sdm_matches_double_loop(seed, n):
    rng = np.random.default_rng(seed)
    V, T = unit_rows(rng, n, 5), unit_rows(rng, n, 5)
    ids = rng.integers(0, 3, size=n)
    q = match_distribution(ids)
    cfg = SdmConfig(0.02, 1e-8)
    got = sdm_i2t(Tensor(V), Tensor(T), q, cfg).item()
    assert abs(got - loop_oracle(V, T, q, 0.02, 1e-8)) <= 1e-10 * max(1.0, abs(got))
    both = sdm_bidirectional(Tensor(V), Tensor(T), q, cfg).item()
    ref = loop_oracle(V, T, q, 0.02, 1e-8) + loop_oracle(T, V, q.T, 0.02, 1e-8)
    assert abs(both - ref) <= 1e-10 * max(1.0, abs(both))


def test_sdm_orthonormal_distinct_ids_with_guard():
    V = np.eye(4, 6)
    loss = sdm_i2t(Tensor(V), Tensor(V), match_distribution([0, 1, 2, 3]), SdmConfig(0.02, 1e-8))
    assert abs(loss.item()) < 1e-6


def test_sdm_single_pair_is_minus_epsilon():
    V = Tensor(np.array([[0.6, 0.8]]))
    loss = sdm_i2t(V, V, np.array([[1.0]]), SdmConfig(0.02, 1e-8)).item()
    assert loss == pytest.approx(-math.log(1.0 + 1e-8), abs=1e-20)
    assert loss == pytest.approx(-1e-8, rel=1e-7)


def test_sdm_rejects_unnormalised_rows():
    with pytest.raises(ContractError):
        sdm_i2t(Tensor(np.ones((2, 3))), Tensor(np.eye(2, 3)), np.eye(2))


def test_sdm_config_validation():
    with pytest.raises(ValueError):
        SdmConfig(tau=0.0)
    with pytest.raises(ValueError):
        SdmConfig(epsilon=-1.0)


def test_bidirectional_symmetric_setup_doubles():
    rng = np.random.default_rng(0)
    V = unit_rows(rng, 4, 6)
    q = match_distribution([0, 0, 1, 2])
    one = sdm_i2t(Tensor(V), Tensor(V), q).item()
    assert sdm_bidirectional(Tensor(V), Tensor(V), q).item() == pytest.approx(2 * one, abs=1e-15)


@given(st.integers(0, 2**31))
@settings(max_examples=30)
def test_bidirectional_joint_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    V, T = unit_rows(rng, 6, 4), unit_rows(rng, 6, 4)
    ids = rng.integers(0, 3, size=6)
    perm = rng.permutation(6)
    a = sdm_bidirectional(Tensor(V), Tensor(T), match_distribution(ids)).item()
    b = sdm_bidirectional(Tensor(V[perm]), Tensor(T[perm]), match_distribution(ids[perm])).item()
    assert abs(a - b) <= 1e-10 * max(1.0, abs(a))


@given(st.integers(0, 2**31), st.floats(0.05, 2.0))
@settings(max_examples=30)
def test_kl_is_non_negative_and_zero_at_match(seed, tau):
    rng = np.random.default_rng(seed)
    V, T = unit_rows(rng, 5, 3), unit_rows(rng, 5, 3)
    cfg = SdmConfig(tau, 0.0)
    logits = V @ T.T / tau
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    assert sdm_i2t(Tensor(V), Tensor(T), p, cfg).item() >= -1e-12
    # a full-support q that differs from p gives strictly positive divergence
    q = np.full((5, 5), 0.2)
    assert sdm_i2t(Tensor(V), Tensor(T), q, cfg).item() >= -1e-12
    assert abs(sdm_i2t(Tensor(V), Tensor(T), p, cfg).item()) < 1e-12


def test_total_loss_examples():
    sdm = Tensor(1.234)
    assert total_loss(sdm, Tensor(0.9), Tensor(0.8), 0.0) is sdm
    out = total_loss(sdm, Tensor(1 / 3), Tensor(1 / 3), 0.5).item()
    assert out == pytest.approx(1.234 + 1 / 3, abs=1e-15)
    with pytest.raises(ValueError):
        total_loss(sdm, Tensor(0.0), Tensor(0.0), -0.1)


@given(st.floats(0, 5), st.floats(0, 5), st.floats(-3, 3), st.floats(0, 2), st.floats(0, 2))
def test_total_loss_linear_in_alpha(a1, a2, sdm, lbi, lbt):
    t1 = total_loss(Tensor(sdm), Tensor(lbi), Tensor(lbt), a1).item()
    t2 = total_loss(Tensor(sdm), Tensor(lbi), Tensor(lbt), a2).item()
    assert t1 - t2 == pytest.approx((a1 - a2) * (lbi + lbt), abs=1e-12)


def test_total_loss_router_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    d, n = 6, 4

    def P(name, arr):
        return Parameter(name, Tensor(arr))

    experts = [AdapterExpert(P(f"e{i}.Wd", rng.normal(0, 0.5, (d, 3))), P(f"e{i}.bd", rng.normal(0, 0.5, 3)),
                             P(f"e{i}.Wu", rng.normal(0, 0.5, (3, d))), P(f"e{i}.bu", rng.normal(0, 0.5, d)))
               for i in range(n)]
    for e in experts:
        for p in e.parameters():
            p.freeze()
    router = DomainRouter.create("r", d, n, 2, "domain", 4, rng, init_std=0.5)
    xi, xt = rng.normal(size=(3, d)), rng.normal(size=(3, d))
    q = match_distribution([0, 1, 2])

    def branch(x):
        y, outcome = sma_forward(Tensor(x), Tensor(x), experts, router)
        return ad.l2_normalize(y), load_balance_loss(outcome)

    def f():
        v, lb_i = branch(xi)
        t, lb_t = branch(xt)
        return total_loss(sdm_bidirectional(v, t, q, SdmConfig(0.5, 1e-8)), lb_i, lb_t, 0.5)

    report = grad_check(f, router.parameters(), eps=1e-6, tol=1e-4)
    assert report.passed, report.summary()
