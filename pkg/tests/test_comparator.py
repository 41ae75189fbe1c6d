import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from hintlm.comparator import (Comparator, ComparatorConfig, EmptyBatch, NonPositiveLatency,
                               ShapeMismatch, ground_truth_label, ground_truth_labels, weighted_loss)

D = 8


@pytest.mark.parametrize("t0, t1, y", [
    (3000, 1500, 0), (1000, 1000, 1), (400, 1200, 3),
    (1100, 1000, 1), (900, 1000, 2), (1499, 1000, 1), (1500, 1000, 0),
    (5000, 4500, 1), (5000, 3900, 0),  # r1 >= 1000 wins although r0 < 3/2
    (3900, 5000, 3), (10, 14, 2), (10, 15, 2), (10, 16, 3),
])
def test_label_examples(t0, t1, y):
    assert ground_truth_label(t0, t1) == y
    assert ground_truth_labels(np.array([t0]), np.array([t1]))[0] == y


@pytest.mark.parametrize("t0, t1", [(0, 1), (1, -2), (float("nan"), 1), (float("inf"), 1)])
def test_label_rejects_bad_latency(t0, t1):
    with pytest.raises(NonPositiveLatency):
        ground_truth_label(t0, t1)
    with pytest.raises(NonPositiveLatency):
        ground_truth_labels(np.array([t0]), np.array([t1]))


@settings(max_examples=300)
@given(st.floats(0.01, 1e6), st.floats(0.01, 1e6), st.floats(0.0, 1.0))
def test_label_monotone_in_first_latency(t0, t1, shrink):
    faster = t0 * shrink if shrink > 0 else t0
    if faster > 0:
        assert ground_truth_label(faster, t1) >= ground_truth_label(t0, t1)


def test_vectorized_matches_scalar():
    rng = np.random.default_rng(0)
    t0 = rng.uniform(1, 5000, 5000)
    t1 = rng.uniform(1, 5000, 5000)
    assert ground_truth_labels(t0, t1).tolist() == [ground_truth_label(a, b) for a, b in zip(t0, t1)]


def test_loss_hand_computed():
    ln = math.log
    logits = torch.tensor([[0.0, 0, 0, 0], [0, ln(3), 0, 0], [ln(2), 0, 0, 0], [0, 0, ln(4), 0]],
                          dtype=torch.float64)
    labels = torch.tensor([0, 1, 3, 2])
    expected = (2 * ln(4) + ln(2) + 2 * ln(5) + ln(7 / 4)) / 4
    assert abs(float(weighted_loss(logits, labels, [2, 1, 1, 2])) - expected) <= 1e-12
    assert float(weighted_loss(logits[:1], labels[:1], [1, 1, 1, 1])) == pytest.approx(ln(4), abs=1e-15)
    # doubling the true-class weight doubles that sample's contribution
    one = float(weighted_loss(logits[1:2], labels[1:2], [1, 1, 1, 1]))
    two = float(weighted_loss(logits[1:2], labels[1:2], [1, 2, 1, 1]))
    assert two == pytest.approx(2 * one, abs=1e-15)
    with pytest.raises(EmptyBatch):
        weighted_loss(logits[:0], labels[:0], [1, 1, 1, 1])


def test_predict_probabilities_and_routing():
    torch.manual_seed(0)
    c = Comparator(ComparatorConfig(d_llm=D)).double()
    e0, e1 = torch.randn(6, D, dtype=torch.float64), torch.randn(6, D, dtype=torch.float64)
    p = c(e0, e1, hard=False)
    assert torch.all(p >= 0) and torch.allclose(p.sum(-1), torch.ones(6, dtype=torch.float64), atol=1e-9)
    # hard routing picks head1 exactly where the gate is >= 0.5
    g = c.gate(torch.cat([e0, e1], -1))
    hard = c.logits(e0, e1, hard=True)
    e = torch.cat([e0, e1], -1)
    expect = torch.where(g[:, None] >= 0.5, c.head1(e), c.head0(e))
    assert torch.equal(hard, expect)
    with torch.no_grad():
        c.head1.load_state_dict(c.head0.state_dict())
    torch.testing.assert_close(c(e0, e1, hard=True), c(e0, e1, hard=False), rtol=0, atol=1e-15)
    c.eval()
    assert torch.equal(c.logits(e0, e1), c.logits(e0, e1, hard=True))
    with pytest.raises(ShapeMismatch):
        c(e0[:, :3], e1[:, :3])


def test_config_validation():
    with pytest.raises(ValueError):
        ComparatorConfig(class_weights=[1, 1, 1])
    with pytest.raises(ValueError):
        ComparatorConfig(class_weights=[1, 0, 1, 1])


def test_gradients_match_finite_differences():
    torch.manual_seed(1)
    c = Comparator(ComparatorConfig(d_llm=D)).double()
    e0, e1 = torch.randn(5, D, dtype=torch.float64), torch.randn(5, D, dtype=torch.float64)
    labels = torch.tensor([0, 1, 2, 3, 0])

    def loss():
        return weighted_loss(c.logits(e0, e1, hard=False), labels, c.class_weights)

    c.zero_grad()
    loss().backward()
    eps = 1e-6
    for name, p in c.named_parameters():
        flat = p.data.view(-1)
        for k in range(0, flat.numel(), max(1, flat.numel() // 7)):
            orig = flat[k].item()
            flat[k] = orig + eps
            up = loss().item()
            flat[k] = orig - eps
            down = loss().item()
            flat[k] = orig
            num = (up - down) / (2 * eps)
            ana = p.grad.view(-1)[k].item()
            assert abs(num - ana) <= 1e-4 * max(abs(num), abs(ana), 1e-8), name


def test_separable_training_loss_decreases():
    torch.manual_seed(0)
    c = Comparator(ComparatorConfig(d_llm=D)).double()
    e0, e1 = torch.randn(200, D, dtype=torch.float64), torch.randn(200, D, dtype=torch.float64)
    score = (e0 - e1)[:, 0].contiguous()
    labels = torch.bucketize(score, torch.tensor([-1.0, 0.0, 1.0], dtype=torch.float64))
    opt = torch.optim.AdamW(c.parameters(), lr=1e-2)
    hist = []
    for _ in range(5):
        opt.zero_grad()
        loss = weighted_loss(c.logits(e0, e1, hard=False), labels, c.class_weights)
        loss.backward()
        opt.step()
        hist.append(loss.item())
    assert all(b < a for a, b in zip(hist, hist[1:4]))
