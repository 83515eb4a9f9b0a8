"""Small double-precision instances for finite-difference gradient checks.

Each builder takes a seed and returns ``(loss_fn, tensors)`` where ``loss_fn``
maps the current tensor values to a scalar and ``tensors`` lists every leaf
(inputs and parameters) whose gradient is checked.
"""

import numpy as np
import torch

from antiuav.tracker.model import (
    ClassModulator,
    InstanceModulator,
    RCNNHead,
    RPNHead,
    csm_modulate,
    ism_modulate,
    rcnn_forward,
    rpn_forward,
)
from antiuav.training import AnchorAssignment, rcnn_loss, rpn_loss
from oracles import numeric_grad

C, K, HW, A, HIDDEN = 3, 3, 5, 3, 6


def _module(cls, seed, *args):
    torch.manual_seed(seed)
    m = cls(*args).double()
    with torch.no_grad():
        for p in m.parameters():
            p.copy_(torch.randn_like(p) * 0.5)
    return m


def _leaves(*tensors):
    return [t.requires_grad_(True) for t in tensors]


def _projection(seed, *shapes):
    g = torch.Generator().manual_seed(seed + 1000)
    return [torch.randn(s, generator=g, dtype=torch.float64) for s in shapes]


def csm_case(seed):
    m = _module(ClassModulator, seed, C)
    z, x = _leaves(torch.randn(2, C, K, K, dtype=torch.float64), torch.randn(2, C, HW, HW, dtype=torch.float64))
    (w,) = _projection(seed, (2, C, HW, HW))
    return (lambda: (csm_modulate(z, x, m) * w).sum()), [z, x, *m.parameters()]


def ism_case(seed):
    m = _module(InstanceModulator, seed, C)
    z, xk = _leaves(torch.randn(C, K, K, dtype=torch.float64), torch.randn(4, C, K, K, dtype=torch.float64))
    (w,) = _projection(seed, (4, C, K, K))
    return (lambda: (ism_modulate(z, xk, m) * w).sum()), [z, xk, *m.parameters()]


def rpn_forward_case(seed):
    head = _module(RPNHead, seed, C, A)
    (t,) = _leaves(torch.randn(2, C, HW, HW, dtype=torch.float64))
    n = HW * HW * A
    ws, wd = _projection(seed, (2, n), (2, n, 4))

    def f():
        s, d = rpn_forward(t, head)
        return (s * ws).sum() + (d * wd).sum()

    return f, [t, *head.parameters()]


def rcnn_forward_case(seed):
    head = _module(RCNNHead, seed, C, K, HIDDEN)
    (t,) = _leaves(torch.randn(4, C, K, K, dtype=torch.float64))
    ws, wd = _projection(seed, (4,), (4, 4))

    def f():
        s, d = rcnn_forward(t, head)
        return (s * ws).sum() + (d * wd).sum()

    return f, [t, *head.parameters()]


def rpn_loss_case(seed):
    rng = np.random.default_rng(seed)
    n = 40
    labels = torch.from_numpy(rng.choice([-1, 0, 1], size=n, p=[0.3, 0.5, 0.2]))
    labels[0] = 1
    targets = torch.from_numpy(rng.normal(0, 1, size=(n, 4)))
    scores, deltas = _leaves(torch.from_numpy(rng.normal(0, 2, size=n)), torch.from_numpy(rng.normal(0, 1.5, size=(n, 4))))
    asg = AnchorAssignment(labels, targets, False)
    return (lambda: rpn_loss(scores, deltas, beta=0.7, assignment=asg)), [scores, deltas]


def ism_loss_case(seed):
    """Proposal-level loss ``sum_k (BCE + beta * smoothL1) / M`` through modulation and head."""
    ism = _module(InstanceModulator, seed, C)
    head = _module(RCNNHead, seed + 1, C, K, HIDDEN)
    rng = np.random.default_rng(seed)
    m = 5
    labels = torch.from_numpy((rng.random(m) < 0.4).astype(np.float64))
    labels[0] = 1.0
    targets = torch.from_numpy(rng.normal(0, 1, size=(m, 4)))
    z, xk = _leaves(torch.randn(C, K, K, dtype=torch.float64), torch.randn(m, C, K, K, dtype=torch.float64))

    def f():
        logits, refine = rcnn_forward(ism_modulate(z, xk, ism), head)
        return rcnn_loss(logits, refine, labels, targets, beta=1.0).sum() / m

    return f, [z, xk, *ism.parameters(), *head.parameters()]


CASES = {
    "csm_modulate": csm_case,
    "ism_modulate": ism_case,
    "rpn_forward": rpn_forward_case,
    "rcnn_forward": rcnn_forward_case,
    "rpn_loss": rpn_loss_case,
    "L_ISM": ism_loss_case,
}


def max_relative_error(builder, seed, eps=1e-5):
    """Largest per-tensor ``|g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|)`` (L2 norms)."""
    f, tensors = builder(seed)
    for t in tensors:
        t.grad = None
    f().backward()
    worst = 0.0
    with torch.no_grad():
        for t in tensors:
            analytic = t.grad.detach().numpy()
            numeric = numeric_grad(f, t, eps)
            scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
            worst = max(worst, np.linalg.norm(analytic - numeric) / scale)
    return worst
