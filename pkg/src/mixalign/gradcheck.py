"""Central finite-difference checks for every differentiable piece.

Relative error of one gradient entry is ``|a - n| / max(|a|, |n|, floor)``
with analytic value ``a``, numeric value ``n`` and ``floor = 1e-5`` (below
that, float64 differences at step ``1e-6`` are noise). A case reports the
maximum over all entries of all inputs.

Non-scalar outputs are reduced with a fixed random projection, so every
output entry contributes a distinct weight.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tn
from .align import DomainPartition, alignment_loss, channel_descriptor
from .cbam import init_cbam, cbam_forward
from .distill import kd_loss
from .mixstyle import MixStyleConfig, restyle
from .network import Network
from .objective import bce_with_logits, binary_logit, total_loss
from .tensor import Tensor

__all__ = [
    "GradCheckResult",
    "numeric_gradient",
    "check_gradients",
    "OP_CASES",
    "LOSS_CASES",
    "end_to_end_case",
    "run_suite",
]

STEP = 1e-6
FLOOR = 1e-5


@dataclass
class GradCheckResult:
    name: str
    seed: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


def numeric_gradient(fn: Callable[[], float], array: np.ndarray, step: float = STEP) -> np.ndarray:
    """d fn / d array by central differences, perturbing ``array`` in place."""
    grad = np.zeros_like(array)
    flat, gflat = array.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn()
        flat[i] = orig - step
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def check_gradients(build: Callable[[list[Tensor]], Tensor], inputs: list[Tensor], step: float = STEP) -> float:
    """Max relative error between backprop and finite differences for ``build(inputs)``."""
    for t in inputs:
        t.grad = None
    out = build(inputs)
    proj = np.random.default_rng(1234).uniform(0.5, 1.5, out.shape) if out.ndim else None

    def scalar(o: Tensor) -> Tensor:
        return o if proj is None else (o * Tensor(proj)).sum()

    scalar(out).backward()
    worst = 0.0
    with tn.no_grad():
        for t in inputs:
            if not t.requires_grad:
                continue
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            numeric = numeric_gradient(lambda: float(scalar(build(inputs)).data), t.data, step)
            denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), FLOOR)
            worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst


# ---------------------------------------------------------------------------
# inputs that keep clear of kinks (relu, abs, max ties) by a margin >> step
# ---------------------------------------------------------------------------

def _leaf(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _away_from_zero(rng, shape, margin=0.1):
    return rng.choice([-1.0, 1.0], shape) * rng.uniform(margin, 1.5, shape)


def _distinct(rng, shape):
    """Values whose pairwise gaps are at least 0.01, so maxima are unique."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.01 + rng.uniform(0, 0.002, n) - n * 0.005).reshape(shape)


def _unary(kind, positive=False, margin=False):
    def make(rng):
        shape = (3, 4)
        if positive:
            x = rng.uniform(0.3, 2.0, shape)
        elif margin:
            x = _away_from_zero(rng, shape)
        else:
            x = rng.normal(0, 1, shape)
        return (lambda ins: tn.elementwise(kind, ins[0])), [_leaf(x)]
    return make


def _binary(kind):
    def make(rng):
        a = rng.normal(0, 1, (3, 4))
        b = rng.normal(0, 1, (4,))
        if kind == "div":
            b = _away_from_zero(rng, (4,), 0.5)
        if kind == "maximum":
            a = _distinct(rng, (3, 4))
            b = _distinct(rng, (4,)) + 0.005
        return (lambda ins: tn.elementwise(kind, ins[0], ins[1])), [_leaf(a), _leaf(b)]
    return make


def _reduction(kind, axes, keep):
    def make(rng):
        x = _distinct(rng, (2, 3, 4)) if kind == "max" else rng.normal(0, 1, (2, 3, 4))
        return (lambda ins: tn.reduce(kind, ins[0], axes, keep)), [_leaf(x)]
    return make


def _case_matmul(rng):
    return (lambda ins: ins[0] @ ins[1]), [_leaf(rng.normal(0, 1, (3, 5))), _leaf(rng.normal(0, 1, (5, 2)))]


def _case_conv(stride, padding, bias):
    def make(rng):
        x = _leaf(rng.normal(0, 1, (2, 3, 6, 6)))
        k = _leaf(rng.normal(0, 0.5, (4, 3, 3, 3)))
        ins = [x, k] + ([_leaf(rng.normal(0, 1, 4))] if bias else [])
        return (lambda i: tn.conv2d(i[0], i[1], i[2] if bias else None, stride=stride, padding=padding)), ins
    return make


def _case_pool(rng):
    return (lambda ins: tn.avg_pool2d(ins[0], 2)), [_leaf(rng.normal(0, 1, (2, 3, 4, 6)))]


def _case_softmax(fn):
    def make(rng):
        return (lambda ins: fn(ins[0], axis=-1)), [_leaf(rng.normal(0, 2, (4, 3)))]
    return make


def _case_softplus(rng):
    return (lambda ins: tn.softplus(ins[0])), [_leaf(rng.normal(0, 3, (3, 4)))]


def _case_reshape(rng):
    return (lambda ins: ins[0].reshape(4, 6).transpose(1, 0)), [_leaf(rng.normal(0, 1, (2, 3, 4)))]


def _case_index(rng):
    return (lambda ins: ins[0][1:, ::2] * 1.0), [_leaf(rng.normal(0, 1, (3, 5)))]


def _case_take(rng):
    idx = rng.integers(0, 4, 6)
    return (lambda ins: tn.take(ins[0], idx, axis=0)), [_leaf(rng.normal(0, 1, (4, 3)))]


def _case_concat(rng):
    return (lambda ins: tn.concat([ins[0], ins[1]], axis=1)), [
        _leaf(rng.normal(0, 1, (2, 3))), _leaf(rng.normal(0, 1, (2, 2)))
    ]


def _case_restyle(rng):
    x = rng.normal(0, 1, (3, 2, 4, 4)) * rng.uniform(0.5, 2, (3, 2, 1, 1)) + rng.normal(0, 1, (3, 2, 1, 1))
    perm = rng.permutation(3)
    lam = rng.uniform(0.05, 0.95, 3)

    def build(ins):
        return restyle(ins[0], tn.take(ins[0], perm, axis=0), lam, 1e-6)
    return build, [_leaf(x)]


def _case_cbam(rng):
    F = _leaf(_distinct(rng, (2, 8, 4, 4)))
    params = init_cbam(8, rng, reduction=4, kernel_size=3)
    leaves = [F] + [_leaf(t.data + rng.normal(0, 0.1, t.shape)) for t in params.named("c").values()]
    names = list(params.named("c"))

    def build(ins):
        p = dict(zip(names, ins[1:]))
        from .cbam import CbamParams
        cp = CbamParams(p["c.w1"], p["c.b1"], p["c.w2"], p["c.b2"], p["c.spatial_kernel"], p["c.spatial_bias"])
        return cbam_forward(ins[0], cp)
    return build, leaves


OP_CASES: dict[str, Callable] = {
    "add": _binary("add"),
    "sub": _binary("sub"),
    "mul": _binary("mul"),
    "div": _binary("div"),
    "maximum": _binary("maximum"),
    "neg": _unary("neg"),
    "exp": _unary("exp"),
    "log": _unary("log", positive=True),
    "relu": _unary("relu", margin=True),
    "sigmoid": _unary("sigmoid"),
    "sqrt": _unary("sqrt", positive=True),
    "square": _unary("square"),
    "abs": _unary("abs", margin=True),
    "sum": _reduction("sum", (1,), False),
    "mean": _reduction("mean", (0, 2), True),
    "max": _reduction("max", (2,), False),
    "var": _reduction("var", (1, 2), True),
    "matmul": _case_matmul,
    "conv2d": _case_conv(1, 1, True),
    "conv2d_strided": _case_conv(2, 0, False),
    "avg_pool2d": _case_pool,
    "softmax": _case_softmax(tn.softmax),
    "log_softmax": _case_softmax(tn.log_softmax),
    "softplus": _case_softplus,
    "reshape_transpose": _case_reshape,
    "index": _case_index,
    "take": _case_take,
    "concat": _case_concat,
    "mixstyle_restyle": _case_restyle,
    "cbam": _case_cbam,
}


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _case_bce(rng):
    y = rng.integers(0, 2, 6)
    return (lambda ins: bce_with_logits(binary_logit(ins[0]), y)), [_leaf(rng.normal(0, 2, (6, 2)))]


def _case_align(rng):
    domains = np.array([0, 0, 1, 1, 2, 2, 2])
    partition = DomainPartition({d: np.flatnonzero(domains == d) for d in (0, 1, 2)})
    return (lambda ins: alignment_loss(channel_descriptor(ins[0]), partition)), [
        _leaf(rng.normal(0, 1, (7, 5, 2, 2)))
    ]


def _case_kd(rng):
    z_t = rng.normal(0, 2, (5, 2))
    T = rng.uniform(1.0, 4.0)
    return (lambda ins: kd_loss(ins[0], Tensor(z_t), T)), [_leaf(rng.normal(0, 2, (5, 2)))]


def _case_total(rng):
    lam_a, lam_k = rng.uniform(0, 1, 2)

    def build(ins):
        return total_loss(ins[0].sum(), ins[1].sum(), ins[2].sum(), lam_a, lam_k)
    return build, [_leaf(rng.uniform(0, 1, 2)) for _ in range(3)]


LOSS_CASES: dict[str, Callable] = {
    "bce": _case_bce,
    "align_loss": _case_align,
    "kd_loss": _case_kd,
    "total_loss": _case_total,
}


def end_to_end_case(seed: int) -> float:
    """L_total of the widths (4, 8, 8) model on a 2-sample batch vs finite differences, over all parameters.

    Style mixing is forced on (probability 1) with a generator reseeded per
    evaluation, both samples come from different domains, and a perturbed
    copy of the weights plays the teacher.
    """
    rng = np.random.default_rng(seed)
    net = Network.create(
        rng, widths=(4, 8, 8), cbam_reduction=4, mixstyle=MixStyleConfig(alpha=0.1, apply_probability=1.0)
    )
    images = rng.uniform(0, 1, (2, 3, 32, 32))
    labels = np.array([0, 1])
    partition = DomainPartition({0: np.array([0]), 1: np.array([1])})
    teacher = {k: Tensor(v.data + rng.normal(0, 0.05, v.shape)) for k, v in net.params.items()}
    with tn.no_grad():
        net.eval()
        z_t, _ = net.forward(images, params=teacher)
        net.train()
    names = list(net.params)
    mix_seed = seed + 10_000

    def build(ins):
        params = dict(zip(names, ins))
        logits, F_hat = net.forward(images, rng=np.random.default_rng(mix_seed), params=params)
        l_cls = bce_with_logits(binary_logit(logits), labels)
        l_align = alignment_loss(channel_descriptor(F_hat), partition)
        l_kd = kd_loss(logits, z_t, 2.0)
        return total_loss(l_cls, l_align, l_kd, 0.7, 0.3)

    return check_gradients(build, [net.params[k] for k in names])


def run_suite(seeds: int = 20, tol: float = 1e-4, e2e_seeds: int = 3, e2e_tol: float = 1e-3) -> list[GradCheckResult]:
    results = []
    for name, make in {**OP_CASES, **LOSS_CASES}.items():
        for seed in range(seeds):
            build, inputs = make(np.random.default_rng([seed, 99]))
            results.append(GradCheckResult(name, seed, check_gradients(build, inputs), tol))
    for seed in range(e2e_seeds):
        results.append(GradCheckResult("end_to_end", seed, end_to_end_case(seed), e2e_tol))
    return results
