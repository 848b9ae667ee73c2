import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from stnmamba import ConfigError, MemoryBank, ModeError
from stnmamba.memory import (cosine_similarity, nearest_distance, nearest_two, topk_count,
                             topk_softmax, write_items)

from gradutil import fd_check
from oracles import cosine_loop, sorted_nearest, topk_read_loop, write_loop


def bank(n=10, dim=6, k=60.0, seed=0):
    torch.manual_seed(seed)
    return MemoryBank(n, dim, k).double()


# --- read --------------------------------------------------------------------

def test_cosine_matches_loop(rng):
    Q, M = rng.standard_normal((5, 4)), rng.standard_normal((7, 4))
    np.testing.assert_allclose(cosine_similarity(torch.tensor(Q), torch.tensor(M)).numpy(),
                               cosine_loop(Q, M), atol=1e-14)


@pytest.mark.parametrize("k", [10, 33.3, 60, 100])
def test_read_matches_loop_oracle(rng, k):
    m = bank(9, 5, k)
    Q = torch.tensor(rng.standard_normal((2, 6, 5)))
    Q_hat, w, _ = m.read(Q)
    for b in range(2):
        W_ref, R_ref = topk_read_loop(Q[b].numpy(), m.items.detach().numpy(), k)
        np.testing.assert_allclose(w[b].detach().numpy(), W_ref, atol=1e-12)
        np.testing.assert_allclose(Q_hat[b].detach().numpy(), R_ref, atol=1e-12)


@pytest.mark.parametrize("n,k,expected", [(80, 60, 48), (60, 60, 36), (40, 60, 24), (20, 60, 12),
                                          (5, 60, 3), (7, 60, 5), (3, 10, 1), (10, 100, 10)])
def test_topk_count(n, k, expected):
    assert topk_count(n, k) == expected


@pytest.mark.parametrize("k", [0, -5, 101])
def test_topk_count_rejects_bad_percent(k):
    with pytest.raises(ConfigError):
        topk_count(10, k)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 40), nq=st.integers(1, 12), seed=st.integers(0, 2**31))
def test_read_weights_rows_sum_to_one_with_k_supported(n, nq, seed):
    m = bank(n, 4, 60, seed % 1000)
    Q = torch.tensor(np.random.default_rng(seed).standard_normal((nq, 4)))
    _, w, mask = m.read(Q)
    torch.testing.assert_close(w.sum(-1), torch.ones(nq, dtype=torch.float64), rtol=0, atol=1e-12)
    assert (mask.sum(-1) == math.ceil(0.6 * n - 1e-9)).all()
    assert (w > 0).all()


def test_masked_entries_enter_softmax_as_zero():
    w_hat = torch.tensor([[0.9, -0.5, 0.1, 0.3, -0.9]], dtype=torch.float64)
    # top 3 of 5 kept: 0.9, 0.3, 0.1; the rest become 0 before softmax
    z = torch.tensor([[0.9, 0.0, 0.1, 0.3, 0.0]], dtype=torch.float64)
    torch.testing.assert_close(topk_softmax(w_hat, 60), torch.softmax(z, -1))


def test_bank_forward_adds_scaled_input(rng):
    m = bank(8, 4)
    with torch.no_grad():
        m.scale.copy_(torch.tensor([0.5, 1.0, 2.0, -1.0]))
    F_st = torch.tensor(rng.standard_normal((2, 3, 2, 4)))
    out, Q, w, _ = m(F_st)
    assert Q.shape == (2, 6, 4)
    torch.testing.assert_close(Q[1, 3], F_st[1, 1, 1])  # row-major query index r * W + c
    Q_hat, _, _ = m.read(Q)
    torch.testing.assert_close(out, Q_hat.reshape(2, 3, 2, 4) + m.scale * F_st)


def test_init_items_unit_rows_and_scale_ones():
    m = MemoryBank(20, 8)
    torch.testing.assert_close(m.items.norm(dim=-1), torch.ones(20))
    assert torch.equal(m.scale.detach(), torch.ones(8))


def test_read_gradients_with_constant_mask(rng):
    m = bank(7, 4)
    Q = torch.tensor(rng.standard_normal((5, 4)), requires_grad=True)
    w = torch.tensor(rng.standard_normal((5, 4)))
    err = fd_check(lambda: (m.read(Q)[0] * w).sum(), [Q, m.items])
    assert err < 1e-6


# --- write -------------------------------------------------------------------

def test_write_matches_loop_oracle(rng):
    M, Q = rng.standard_normal((6, 5)), rng.standard_normal((11, 5))
    np.testing.assert_allclose(write_items(torch.tensor(M), torch.tensor(Q)).numpy(),
                               write_loop(M, Q), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(2, 30), seed=st.integers(0, 2**31))
def test_written_rows_are_unit_norm(n, seed):
    m = bank(n, 6, seed=seed % 100)
    m.train()
    m.write(torch.tensor(np.random.default_rng(seed).standard_normal((3, 9, 6))))
    torch.testing.assert_close(m.items.norm(dim=-1), torch.ones(n, dtype=torch.float64),
                               rtol=0, atol=1e-6)


def test_write_pools_batch_axis(rng):
    m = bank(5, 3)
    m.train()
    Q = torch.tensor(rng.standard_normal((2, 4, 3)))
    expected = write_items(m.items.detach(), Q.reshape(8, 3))
    m.write(Q)
    torch.testing.assert_close(m.items.detach(), expected)


def test_write_refused_in_eval_mode(rng):
    m = bank(5, 3).eval()
    before = m.items.detach().clone()
    with pytest.raises(ModeError):
        m.write(torch.zeros(1, 4, 3, dtype=torch.float64))
    assert torch.equal(m.items.detach(), before)


def test_eval_reads_leave_bank_bitwise_frozen(rng):
    m = bank(12, 4).eval()
    before = m.items.detach().clone()
    for _ in range(100):
        m(torch.tensor(rng.standard_normal((1, 2, 2, 4))))
    assert torch.equal(m.items.detach(), before)


# --- nearest items -------------------------------------------------------------

def test_nearest_two_matches_sort(rng):
    Q, M = rng.standard_normal((9, 3)), rng.standard_normal((6, 3))
    _, d2 = nearest_two(torch.tensor(Q), torch.tensor(M))
    np.testing.assert_allclose(d2.numpy(), sorted_nearest(Q, M), atol=1e-12)
    np.testing.assert_allclose(nearest_distance(torch.tensor(Q), torch.tensor(M)).numpy(),
                               sorted_nearest(Q, M)[:, 0], atol=1e-12)


def test_nearest_two_ties_go_to_lower_index():
    M = torch.tensor([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    idx, _ = nearest_two(torch.tensor([[1.0, 0.0]]), M)
    assert idx.tolist() == [[0, 2]]


def test_nearest_two_needs_two_items():
    with pytest.raises(ConfigError):
        nearest_two(torch.zeros(2, 3), torch.zeros(1, 3))
