import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from adgen.coattention import AttentionMaps, ProjectionHead, attention_loss, attention_matrix, guidance_scores
from adgen.errors import ShapeError
from adgen.features import PatchSet


def _rand(n, c, seed):
    return torch.from_numpy(np.random.default_rng(seed).normal(size=(n, c)))


@settings(max_examples=30)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 4), st.integers(0, 10_000))
def test_matrix_matches_scalar_oracle(nq, nr, c, seed):
    torch.manual_seed(seed)
    head = ProjectionHead(c, 3).double()
    q, r = _rand(nq, c, seed), _rand(nr, c, seed + 1)
    A = attention_matrix(q, r, head)
    w = head.linear.weight.detach().tolist()
    b = head.linear.bias.detach().tolist()
    expected = oracles.attention_matrix(q.tolist(), r.tolist(), w, b)
    np.testing.assert_allclose(A.detach().numpy(), expected, atol=1e-12)
    assert A.min() >= 0 and A.max() <= 1


def test_identical_patches_give_one():
    head = ProjectionHead(4, 4).double()
    x = _rand(3, 4, 0)
    A = attention_matrix(x, x, head)
    torch.testing.assert_close(torch.diagonal(A), torch.ones(3, dtype=torch.float64))


def test_identity_head_hand_values():
    head = ProjectionHead.identity(2)
    q = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    r = torch.tensor([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]], dtype=torch.float64)
    A = attention_matrix(q, r, head)
    torch.testing.assert_close(A, torch.tensor([[1.0, 0.5, 0.0]], dtype=torch.float64))
    torch.testing.assert_close(guidance_scores(A), torch.tensor([1.0], dtype=torch.float64))


def test_scale_mismatch():
    head = ProjectionHead(2, 2)
    a = PatchSet(torch.zeros(1, 2), np.zeros((1, 2)), 0, (1, 1), 8)
    b = PatchSet(torch.zeros(1, 2), np.zeros((1, 2)), 1, (1, 1), 16)
    with pytest.raises(ShapeError):
        attention_matrix(a, b, head)
    with pytest.raises(ShapeError):
        attention_matrix(torch.zeros(1, 2), torch.zeros(1, 3), head)


def test_attention_loss_hand_example():
    # normal query, global min 0.25
    A = torch.tensor([[0.25, 0.9], [0.7, 0.95]], dtype=torch.float64)
    assert attention_loss([A], 0).item() == pytest.approx(-math.log(0.25), abs=1e-12)
    assert attention_loss([A], 1).item() == pytest.approx(-math.log(0.75), abs=1e-12)


def test_attention_loss_clamps():
    A = torch.zeros(2, 2, dtype=torch.float64)
    assert math.isfinite(attention_loss([A], 0).item())
    assert attention_loss([A], 0).item() == pytest.approx(-math.log(1e-7))


@settings(max_examples=30)
@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)), min_size=1, max_size=3), st.integers(0, 1), st.integers(0, 999))
def test_attention_loss_matches_oracle(shapes, y, seed):
    rng = np.random.default_rng(seed)
    mats = [rng.uniform(size=s) for s in shapes]
    got = attention_loss([torch.from_numpy(m) for m in mats], y).item()
    assert got == pytest.approx(oracles.attention_loss([m.tolist() for m in mats], y), abs=1e-9)


def test_attention_maps_guidance():
    A = [torch.tensor([[0.1, 0.4], [0.9, 0.2]])]
    maps = AttentionMaps.from_matrices(A)
    torch.testing.assert_close(maps.guidance[0], torch.tensor([0.4, 0.9]))
