import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dualstream.config import LossConfig, RunConfig, apply_ablation
from dualstream.gradcheck import check_gradients
from dualstream.losses import (COMPONENTS, MotionPredictor, NonFiniteLossError, RewardHead, reward_loss,
                               similarity_loss, total_loss, transition_loss)

from gradcases import CASES


# similarity ------------------------------------------------------------------------

def test_similarity_identical_is_zero():
    f = torch.rand(3, 4, 2, 2) + 0.1
    assert similarity_loss(f, f.clone())[0].item() == 0.0


def test_similarity_hand_value():
    loss, skipped = similarity_loss(torch.tensor([[2.0]]), torch.tensor([[1.0]]))
    assert loss.item() == 1.0 and skipped == 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_similarity_joint_scale_invariance(seed, c):
    g = torch.Generator().manual_seed(seed)
    f = torch.randn(4, 3, 2, 2, generator=g, dtype=torch.float64)
    h = torch.randn(4, 3, 2, 2, generator=g, dtype=torch.float64)
    base = similarity_loss(f, h)[0].item()
    assert similarity_loss(c * f, c * h)[0].item() == pytest.approx(base, rel=1e-6)


def test_similarity_skips_empty_targets():
    f = torch.ones(3, 2)
    h = torch.tensor([[1.0, 1.0], [0.0, 0.0], [2.0, 2.0]])
    loss, skipped = similarity_loss(f, h)
    assert skipped == 1
    assert loss.item() == pytest.approx((0.0 + 0.5) / 2)


def test_similarity_all_empty_is_zero_with_gradient_path():
    f = torch.ones(2, 3, requires_grad=True)
    loss, skipped = similarity_loss(f, torch.zeros(2, 3))
    assert loss.item() == 0.0 and skipped == 2
    loss.backward()
    assert torch.all(f.grad == 0)


def test_similarity_shape_mismatch():
    with pytest.raises(ValueError):
        similarity_loss(torch.zeros(2, 3), torch.zeros(2, 4))


# transition --------------------------------------------------------------------------

class Shift(torch.nn.Module):
    """Predictor returning f_m plus a fixed offset, for hand-checked values."""

    def __init__(self, offset):
        super().__init__()
        self.offset = offset

    def forward(self, f_m, action):
        return f_m + self.offset


def test_transition_perfect_prediction_zero():
    f = torch.randn(5, 4)
    assert transition_loss(Shift(0.0), f, torch.zeros(5, 2), f.clone()).item() == 0.0


def test_transition_one_coordinate_off_by_one():
    f = torch.zeros(3, 4)
    offset = torch.tensor([0.0, 1.0, 0.0, 0.0])
    assert transition_loss(Shift(offset), f, torch.zeros(3, 2), f.clone()).item() == 1.0


def test_transition_target_is_stop_gradient():
    pred = MotionPredictor(4, 2, 8)
    f = torch.randn(3, 4, requires_grad=True)
    f_next = torch.randn(3, 4, requires_grad=True)
    transition_loss(pred, f, torch.zeros(3, 2), f_next).backward()
    assert f.grad is not None and f_next.grad is None


def test_transition_encoder_gradient_independent_of_target_graph():
    # perturbing the target tensor's upstream leaves the encoder-side gradient
    # equal to the one computed with the target held as plain data
    torch.manual_seed(0)
    pred = MotionPredictor(4, 2, 8)
    enc = torch.nn.Linear(6, 4)
    x, x_next, a = torch.randn(3, 6), torch.randn(3, 6), torch.randn(3, 2)

    def enc_grad(target):
        enc.zero_grad()
        transition_loss(pred, enc(x), a, target).backward()
        return enc.weight.grad.clone()

    live = enc(x_next)
    assert torch.equal(enc_grad(live), enc_grad(live.detach().clone()))


def test_transition_predictor_gradients():
    fn, params = CASES["transition"](0)
    assert check_gradients(fn, params).pass_fraction >= 0.99


# reward ---------------------------------------------------------------------------

class Const(torch.nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, f, action):
        return torch.full(f.shape[:1], self.value)


def test_reward_perfect_prediction_zero():
    r = torch.tensor([1.5, -2.0])
    assert reward_loss(Const(0.0), torch.zeros(2, 3), torch.zeros(2, 2), torch.zeros(2)).item() == 0.0
    assert reward_loss(Const(1.5), torch.zeros(1, 3), torch.zeros(1, 2), r[:1]).item() == 0.0


def test_reward_zero_head_target_three():
    assert reward_loss(Const(0.0), torch.zeros(4, 3), torch.zeros(4, 2), torch.full((4,), 3.0)).item() == 3.0


def test_reward_l2_option():
    assert reward_loss(Const(0.0), torch.zeros(2, 3), torch.zeros(2, 2), torch.full((2,), 3.0), "l2").item() == 9.0
    with pytest.raises(ValueError):
        reward_loss(Const(0.0), torch.zeros(2, 3), torch.zeros(2, 2), torch.zeros(2), "huber")


def test_reward_head_output_shape():
    assert RewardHead(8, 2, 16)(torch.zeros(5, 8), torch.zeros(5, 2)).shape == (5,)


def test_reward_gradients():
    fn, params = CASES["reward"](1)
    assert check_gradients(fn, params).pass_fraction >= 0.99


def test_similarity_gradients():
    fn, params = CASES["similarity"](2)
    assert check_gradients(fn, params).pass_fraction >= 0.99


# total -----------------------------------------------------------------------------

def test_total_all_zero():
    total, report = total_loss({k: 0.0 for k in COMPONENTS})
    assert total == 0.0 and report.total == 0.0


def test_total_unit_components():
    total, report = total_loss({k: torch.tensor(1.0) for k in COMPONENTS})
    assert total.item() == 5.0 and report.total == 5.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=5, max_size=5), st.lists(st.floats(0, 3), min_size=5, max_size=5))
def test_total_weighted_sum(values, weights):
    comps = dict(zip(COMPONENTS, values))
    w = LossConfig(w_trans=weights[0], w_sg=weights[1], w_reward=weights[2], w_pi=weights[3], w_q=weights[4])
    total, report = total_loss(comps, w)
    expected = sum(wt * v for wt, v in zip(weights, values))
    assert report.total == pytest.approx(expected, rel=1e-9, abs=1e-12)
    for name, wt in zip(COMPONENTS, weights):
        assert getattr(report, name) == (0.0 if wt == 0 else comps[name])


@pytest.mark.parametrize("name", COMPONENTS)
def test_total_rejects_non_finite(name):
    comps = {k: 1.0 for k in COMPONENTS}
    comps[name] = float("nan")
    with pytest.raises(NonFiniteLossError, match=name) as info:
        total_loss(comps, step=17)
    assert info.value.component == name and info.value.step == 17


def test_total_rejects_unknown_component():
    with pytest.raises(KeyError):
        total_loss({"L_bogus": 1.0})


def test_m3_report_zeroes_transition():
    cfg = apply_ablation(RunConfig(), "M3")
    _, report = total_loss({k: 1.0 for k in COMPONENTS}, cfg.loss)
    assert report.L_trans == 0.0 and report.w_trans == 0.0
    assert report.L_SG == 1.0 and report.total == 4.0


def test_total_gradients():
    fn, params = CASES["total"](3)
    assert check_gradients(fn, params).pass_fraction >= 0.99


def test_loss_nonnegativity():
    torch.manual_seed(0)
    pred, head = MotionPredictor(4, 2, 8), RewardHead(4, 2, 8)
    for _ in range(20):
        f, a = torch.randn(3, 4), torch.randn(3, 2)
        assert transition_loss(pred, f, a, torch.randn(3, 4)).item() >= 0
        assert reward_loss(head, f, a, torch.randn(3)).item() >= 0
        assert similarity_loss(torch.randn(3, 4), torch.randn(3, 4))[0].item() >= 0
    assert math.isfinite(similarity_loss(torch.randn(2, 2), torch.full((2, 2), 1e-6))[0].item())
