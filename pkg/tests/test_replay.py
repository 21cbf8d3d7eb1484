import numpy as np
import pytest
import torch
import torch.nn as nn
import torch.nn.functional as F
from hypothesis import given
from hypothesis import strategies as st

from taskvae.data import WindowSet
from taskvae.errors import ConfigError, TopologyError
from taskvae.models import ClassifierModel
from taskvae.replay import (
    ExemplarStore, FisherDiag, MemoryBudget, NearestMeanClassifier, binary_kl, class_quotas,
    ewc_penalty, fisher_diag, herding_order, herding_select, icarl_distillation, icarl_loss,
    less_forget_loss, less_forget_weight, margin_ranking_loss, random_select,
)


def labelled(counts):
    y = np.concatenate([[c] * n for c, n in counts.items()])
    x = np.random.default_rng(0).normal(size=(len(y), 6, 128)).astype(np.float32)
    return WindowSet(x, y)


@given(st.integers(0, 10_000), st.integers(1, 20))
def test_allocations(total, tasks):
    alloc = MemoryBudget(total, tasks).allocations()
    assert sum(alloc) == total and max(alloc) - min(alloc) <= 1
    assert alloc == sorted(alloc, reverse=True)


def test_budget_validation():
    with pytest.raises(ConfigError):
        MemoryBudget(10, 0)
    assert MemoryBudget.per_task(60, 3).total == 180


def test_store_enforces_budget():
    store = ExemplarStore(MemoryBudget(5, 2))
    store.add(labelled({0: 3}), 0)
    with pytest.raises(ValueError, match="exceed"):
        store.add(labelled({1: 3}), 1)
    assert len(store) == 3 and store.nbytes() == 3 * 6 * 128 * 4


def test_class_quotas():
    assert class_quotas([4, 2, 9], 10) == {4: 4, 2: 3, 9: 3}


def test_random_select_stratified_and_seeded():
    ws = labelled({0: 20, 1: 20})
    a = random_select(ws, 10, seed=1)
    assert a.class_counts() == {0: 5, 1: 5}
    np.testing.assert_array_equal(a.x, random_select(ws, 10, seed=1).x)


def test_random_select_clamps(caplog):
    ws = labelled({0: 3, 1: 2})
    with pytest.warns(UserWarning, match="clamp"):
        assert len(random_select(ws, 50, seed=0)) == 5
    assert "clamp" in caplog.text


def test_herding_equal_points_lowest_index():
    assert herding_order(np.ones((4, 3)), 4) == [0, 1, 2, 3]


def test_herding_select_uses_feature_space():
    ws = labelled({0: 10, 1: 10})
    picked = herding_select(ws, 4, lambda x: x.reshape(len(x), -1)[:, :8])
    assert picked.class_counts() == {0: 2, 1: 2}


def test_fisher_matches_manual_gradients():
    torch.manual_seed(0)
    model = nn.Sequential(nn.Linear(3, 4), nn.Tanh(), nn.Linear(4, 2)).double()
    x = torch.randn(6, 3, dtype=torch.float64)
    fd = fisher_diag(model, (x, None))
    expected = {n: torch.zeros_like(p) for n, p in model.named_parameters()}
    for xi in x:
        out = F.log_softmax(model(xi[None]), 1)
        grads = torch.autograd.grad(out[0, out[0].argmax()], list(model.parameters()))
        for (n, _), g in zip(model.named_parameters(), grads):
            expected[n] += g ** 2 / len(x)
    for n in expected:
        torch.testing.assert_close(fd.fisher[n], expected[n])


def test_ewc_closed_form():
    model = nn.Linear(2, 1, bias=False)
    with torch.no_grad():
        model.weight.copy_(torch.tensor([[3.0, -1.0]]))
    fd = FisherDiag({"weight": torch.tensor([[2.0, 0.5]])}, {"weight": torch.tensor([[1.0, 1.0]])})
    # 0.5 * 100 * (2*4 + 0.5*4) = 500
    assert ewc_penalty(model, fd, 100.0).item() == pytest.approx(500.0)


def test_ewc_zero_at_anchor_and_grown_head():
    m = ClassifierModel([0, 1])
    fd = fisher_diag(m, (torch.randn(4, 6, 128), None))
    assert ewc_penalty(m, fd, 100.0).item() == 0.0
    m.add_classes([2])
    assert ewc_penalty(m, fd, 100.0).item() == 0.0


def test_ewc_topology_mismatch():
    fd = FisherDiag({"weight": torch.ones(3, 3)}, {"weight": torch.zeros(3, 3)})
    with pytest.raises(TopologyError):
        ewc_penalty(nn.Linear(2, 2), fd, 1.0)
    with pytest.raises(TopologyError):
        ewc_penalty(nn.Linear(2, 2), FisherDiag({"nope": torch.ones(1)}, {"nope": torch.ones(1)}), 1.0)


def test_binary_kl_zero_when_equal_and_positive_otherwise():
    a = torch.randn(5, 3)
    assert binary_kl(a, a).abs().max() < 1e-6
    assert (binary_kl(a + 1, a) > 0).all()


def test_icarl_loss_without_previous_is_bce():
    logits = torch.randn(4, 3)
    t = torch.tensor([0, 2, 1, 2])
    torch.testing.assert_close(icarl_loss(logits, t, 0, None),
                               F.binary_cross_entropy_with_logits(logits, F.one_hot(t, 3).float()))


def test_icarl_loss_hand_example():
    logits = torch.tensor([[0.0, 1.0]])
    prev = torch.tensor([[0.0, 5.0]])
    t = torch.tensor([1])
    # old unit distils to sigmoid(0)=0.5 which it already matches; new unit BCE(1, target 1)
    expected = F.softplus(torch.tensor(-1.0)) / 2
    torch.testing.assert_close(icarl_loss(logits, t, 1, prev), expected)
    assert float(icarl_distillation(logits, prev, 1)) == pytest.approx(0.0, abs=1e-7)


def test_nearest_mean_classifier():
    f = np.array([[1.0, 0.0], [2.0, 0.1], [0.0, 1.0], [0.1, 3.0]])
    nme = NearestMeanClassifier().fit(f, np.array([7, 7, 9, 9]))
    np.testing.assert_array_equal(nme.predict(np.array([[5.0, 0.5], [0.2, 4.0]])), [7, 9])


def test_less_forget():
    f = torch.tensor([[1.0, 0.0], [0.0, 2.0]])
    assert float(less_forget_loss(f, f * 3)) == pytest.approx(0.0, abs=1e-6)
    assert float(less_forget_loss(f, -f)) == pytest.approx(2.0)
    assert less_forget_weight(5.0, 2, 2) == 5.0
    assert less_forget_weight(5.0, 8, 2) == 10.0


def test_margin_ranking_hand_example():
    # one old-class sample (class 0), gt cosine 0.6, new-class cosines 0.5 and 0.9
    cos = torch.tensor([[0.6, 0.1, 0.5, 0.9], [0.0, 0.0, 0.9, 0.1]])
    t = torch.tensor([0, 2])
    got = margin_ranking_loss(cos, t, n_old=2, margin=0.5, k=2)
    expected = (max(0, 0.5 - 0.6 + 0.9) + max(0, 0.5 - 0.6 + 0.5)) / 2
    assert float(got) == pytest.approx(expected)
    assert float(margin_ranking_loss(cos, torch.tensor([2, 3]), 2)) == 0.0
