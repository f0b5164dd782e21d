import math

import numpy as np
import pytest
import torch

from splitcodec.numerics import AdamW, GradCheckError, OptimizerState, adamw_step, grad_check, lr_schedule


def test_grad_check_matches_known_gradient():
    rep = grad_check(lambda x: (x ** 3).sum() + torch.sin(x).prod(), torch.tensor([0.3, -1.2, 2.0], dtype=torch.float64))
    assert rep.max_rel_error < 1e-6
    x = np.array([0.3, -1.2, 2.0])
    expected = 3 * x ** 2 + np.cos(x) * np.prod(np.sin(x)) / np.sin(x)
    np.testing.assert_allclose(rep.analytic.numpy(), expected, rtol=1e-12)


def test_grad_check_flags_wrong_gradient():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            return x * 2

        @staticmethod
        def backward(ctx, g):
            return g * 3

    with pytest.raises(GradCheckError, match="coordinate"):
        grad_check(lambda x: Bad.apply(x).sum(), torch.ones(3), tolerance=1e-3)


def test_grad_check_reports_nonfinite_coordinate():
    with pytest.raises(GradCheckError, match="coordinate 1"):
        grad_check(lambda x: torch.log(x).sum(), torch.tensor([1.0, 1e-7]), epsilon=1e-6)


def test_adamw_step_matches_hand_computation():
    p = torch.tensor([1.0, -2.0], dtype=torch.float64)
    g = torch.tensor([0.5, 0.25], dtype=torch.float64)
    state = OptimizerState()
    lr, wd, (b1, b2), eps = 0.1, 0.1, (0.9, 0.95), 1e-8
    adamw_step([p], [g], state, lr, (b1, b2), wd, eps)
    m = (1 - b1) * g.numpy() / (1 - b1)
    v = (1 - b2) * g.numpy() ** 2 / (1 - b2)
    expected = np.array([1.0, -2.0]) * (1 - lr * wd) - lr * m / (np.sqrt(v) + eps)
    np.testing.assert_allclose(p.numpy(), expected, rtol=1e-12)


def test_adamw_decay_mask_skips_parameters():
    a = torch.nn.Parameter(torch.ones(2, 2))
    b = torch.nn.Parameter(torch.ones(2))
    opt = AdamW([a, b], weight_decay=0.5, decay_mask=[True, False])
    a.grad = torch.zeros_like(a)
    b.grad = torch.zeros_like(b)
    opt.step(0.1)
    np.testing.assert_allclose(a.detach().numpy(), 0.95)
    np.testing.assert_allclose(b.detach().numpy(), 1.0)


def test_adamw_shape_mismatch():
    with pytest.raises(ValueError):
        adamw_step([torch.zeros(2)], [torch.zeros(3)], OptimizerState(), 0.1)


def test_lr_schedule_shape():
    assert lr_schedule(0, 10, 100) == 0.0
    assert lr_schedule(5, 10, 100) == pytest.approx(3e-4)
    assert lr_schedule(10, 10, 100) == pytest.approx(6e-4)
    assert lr_schedule(55, 10, 100) == pytest.approx(6e-5 + 0.5 * (6e-4 - 6e-5))
    assert lr_schedule(100, 10, 100) == pytest.approx(6e-5)
    assert lr_schedule(500, 10, 100) == pytest.approx(6e-5)
    steps = [lr_schedule(s, 10, 100) for s in range(10, 101)]
    assert all(a >= b for a, b in zip(steps, steps[1:]))
    assert not math.isnan(lr_schedule(3, 0, 100))
