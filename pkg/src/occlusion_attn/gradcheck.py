"""Float64 central finite-difference checks for every op and the assembled models.

Each case builds float64 leaves and a function mapping them to a tensor.  The
scalar probed is ``sum(out * R)`` for a fixed random cotangent ``R``, so every
output component contributes.  The error reported per case is

    max |analytic - numeric| / max(max |analytic|, max |numeric|, 1e-8)

taken over every leaf and every coordinate.  Inputs to piecewise ops are drawn
away from their kinks so a step of ``EPS`` never crosses one.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import attention as A
from . import losses as L
from . import oni as O
from . import tensor as T
from .model import FaceModel, ModelConfig, Variant
from .tensor import Tensor

EPS = 1e-6
PRIMITIVE_TOL = 1e-6
MODEL_TOL = 1e-4


# Finite-difference oracle for leaf j: d/dx of sum_i coef_i(j) * term_i(run()).
# A plain case has the single term sum(out * R) with coefficient ``factor``;
# grad_reverse is not a true gradient, so its factor is -lambda.


@dataclass
class Case:
    name: str
    tier: str  # "primitive" or "model"
    # returns (leaves, fn) or (leaves, fn, run, [(extract, coef), ...])
    build: Callable[[np.random.Generator], tuple]
    factor: float = 1.0

    @property
    def tol(self) -> float:
        return PRIMITIVE_TOL if self.tier == "primitive" else MODEL_TOL


@dataclass
class CaseResult:
    name: str
    tier: str
    max_rel_err: float
    tol: float
    n_coords: int
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)


def leaf(x) -> Tensor:
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True, dtype=np.float64)


def away_from_zero(rng, shape, margin=0.1) -> np.ndarray:
    x = rng.uniform(margin, 1.5, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def distinct(rng, shape) -> np.ndarray:
    """Values with pairwise gaps of at least 0.01, so max pools have no near-ties."""
    size = int(np.prod(shape))
    return (rng.permutation(size) * 0.01 - size * 0.005).reshape(shape) + 0.001


def _unary(name, fn, sample):
    def build(rng):
        x = leaf(sample(rng))
        return [x], lambda: fn(x)
    return Case(name, "primitive", build)


def _binary(name, fn, sa, sb):
    def build(rng):
        a, b = leaf(sa(rng)), leaf(sb(rng))
        return [a, b], lambda: fn(a, b)
    return Case(name, "primitive", build)


def _normal(shape):
    return lambda rng: rng.standard_normal(shape)


def _positive(shape):
    return lambda rng: rng.uniform(0.5, 2.0, shape)


def _conv_case(name, stride, padding, bias):
    def build(rng):
        x = leaf(rng.standard_normal((2, 3, 7, 6)))
        w = leaf(rng.standard_normal((4, 3, 3, 3)))
        leaves = [x, w]
        b = None
        if bias:
            b = leaf(rng.standard_normal(4))
            leaves.append(b)
        return leaves, lambda: T.conv2d(x, w, b, stride, padding)
    return Case(name, "primitive", build)


def _batchnorm_case(training):
    def build(rng):
        x = leaf(rng.standard_normal((3, 4, 3, 2)) * 2 + 1)
        g, b = leaf(rng.uniform(0.5, 1.5, 4)), leaf(rng.standard_normal(4))
        stats = T.RunningStats(rng.standard_normal(4), rng.uniform(0.5, 2.0, 4))

        def fn():
            # running stats must not leak between the repeated evaluations
            return T.batchnorm(x, g, b, T.RunningStats(stats.mean.copy(), stats.var.copy()),
                               training)
        return [x, g, b], fn
    return Case(f"batchnorm_{'train' if training else 'eval'}", "primitive", build)


def _arcface_case(margin):
    def build(rng):
        z, w = leaf(rng.standard_normal((5, 6))), leaf(rng.standard_normal((6, 4)))
        labels = rng.integers(0, 4, 5)
        return [z, w], lambda: L.arcface_loss(z, L.ArcfaceHead(w, 64.0, margin), labels)
    return Case(f"arcface_loss_m{margin:g}", "primitive", build)


def _cross_entropy_case(rng):
    x = leaf(rng.standard_normal((5, 4)) * 3)
    labels = rng.integers(0, 4, 5)
    return [x], lambda: L.cross_entropy(x, labels)


def _oni_case(rng):
    z = leaf(rng.standard_normal((3, 8)))
    return [z], lambda: O.orthogonalize(z, 12)


def _cbam_cal_case(rng):
    p = A.CbamParams("g", 8, rng, reduction=4, kernel=3)
    x = leaf(away_from_zero(rng, (2, 8, 4, 4)))
    return [x] + p.parameters(), lambda: A.cbam_cal_forward(x, p).x_um


def _mfsa_case(rng):
    p = A.MfsaParams("g", 8, rng, reduction=2)
    x = leaf(rng.standard_normal((2, 8, 4, 4)))
    def fn():
        out = A.mfsa_forward(x, p)
        return T.concat([out.x_um, out.x_m, out.x_bg], axis=1)
    return [x] + p.parameters(), fn


def _channel_softmax_case(rng):
    p = A.CbamParams("g", 8, rng, reduction=4, kernel=3, spatial_out=3)
    x = leaf(away_from_zero(rng, (2, 8, 4, 4)))
    return [x] + p.parameters(), lambda: A.channel_att_softmax_forward(x, p).x_m


def _model_case(variant: Variant):
    def build(rng):
        cfg = ModelConfig(variant=variant, n_classes=3, widths=(4, 8), strides=(1, 2),
                          embedding_dim=6, reduction=2, spatial_kernel=3, w_mask=0.8,
                          w_adv=0.6, grl_lambda=0.7, init_seed=int(rng.integers(1 << 31)))
        model = FaceModel(cfg)
        for p in model.parameters():  # non-trivial affine and bias values
            if p.data.ndim == 1:
                p.data[...] = rng.uniform(0.5, 1.5, p.shape) if "gamma" in p.name \
                    else 0.1 * rng.standard_normal(p.shape)
        images = leaf(rng.standard_normal((4, 3, 6, 6)))
        labels = np.array([0, 1, 2, 1])
        flags = np.array([0, 1, 1, 0])
        leaves = [images] + model.parameters()
        run = lambda: model.forward_train(images, labels, flags)
        terms = [(lambda o: o.loss_arc.item(), lambda j: 1.0)]
        if variant.has_mask_head:
            terms.append((lambda o: o.loss_mask.item(), lambda j: cfg.w_mask))
        if variant.has_adv_head:
            # the adversary descends on its own loss, everything upstream ascends
            adv = {id(p) for p in model.adv_head.parameters()}
            terms.append((lambda o: o.loss_adv.item(),
                          lambda j: cfg.w_adv if id(leaves[j]) in adv
                          else -cfg.grl_lambda * cfg.w_adv))
        return leaves, lambda: run().loss_total, run, terms
    return Case(f"model_{variant.value}", "model", build)


def default_cases() -> list[Case]:
    cases = [
        _binary("add", T.add, _normal((3, 4)), _normal((4,))),
        _binary("sub", T.sub, _normal((3, 1)), _normal((3, 4))),
        _binary("mul", T.mul, _normal((3, 4)), _normal((3, 4))),
        _binary("div", T.div, _normal((3, 4)), lambda r: away_from_zero(r, (1, 4), 0.5)),
        _unary("neg", T.neg, _normal((3, 4))),
        _unary("exp", T.exp, _normal((3, 4))),
        _unary("log", T.log, _positive((3, 4))),
        _unary("sqrt", T.sqrt, _positive((3, 4))),
        _unary("cos", T.cos, _normal((3, 4))),
        _unary("arccos", T.arccos, lambda r: r.uniform(-0.9, 0.9, (3, 4))),
        _unary("clip", lambda x: T.clip(x, -0.5, 0.5),
               lambda r: r.choice([-1.0, 1.0], (4, 5)) * r.choice([0.2, 0.3, 0.8, 1.1], (4, 5))),
        _unary("sigmoid", T.sigmoid, lambda r: r.standard_normal((3, 4)) * 3),
        _unary("relu", T.relu, lambda r: away_from_zero(r, (3, 4))),
        _unary("softmax", lambda x: T.softmax(x, axis=1), _normal((3, 5))),
        _unary("softmax_channel", T.softmax_channel, _normal((2, 3, 2, 2))),
        _unary("log_softmax", lambda x: T.log_softmax(x, axis=1), _normal((3, 5))),
        Case("grad_reverse", "primitive",
             lambda rng: (lambda x: ([x], lambda: T.grad_reverse(x, 0.7)))(
                 leaf(rng.standard_normal((3, 4)))), factor=-0.7),
        _unary("reshape", lambda x: T.reshape(x, (4, 3)), _normal((3, 4))),
        _unary("transpose", lambda x: T.transpose(x, (2, 0, 1)), _normal((2, 3, 4))),
        _unary("sum", lambda x: T.sum_(x, axis=1), _normal((3, 4))),
        _unary("sum_keepdims", lambda x: T.sum_(x, axis=0, keepdims=True), _normal((3, 4))),
        _unary("mean", lambda x: T.mean(x, axis=(0, 2)), _normal((2, 3, 4))),
        _unary("narrow", lambda x: T.narrow(x, 1, 1, 2), _normal((2, 4, 3))),
        _binary("concat", lambda a, b: T.concat([a, b], axis=1), _normal((2, 3)), _normal((2, 2))),
        _binary("matmul", T.matmul, _normal((3, 4)), _normal((4, 2))),
        _conv_case("conv2d_same", 1, 1, True),
        _conv_case("conv2d_stride2", 2, 0, False),
        _unary("pool_spatial_max", lambda x: T.pool_spatial(x, "max"), lambda r: distinct(r, (2, 3, 3, 4))),
        _unary("pool_spatial_avg", lambda x: T.pool_spatial(x, "avg"), _normal((2, 3, 3, 4))),
        _unary("pool_channel_max", lambda x: T.pool_channel(x, "max"), lambda r: distinct(r, (2, 4, 3, 3))),
        _unary("pool_channel_avg", lambda x: T.pool_channel(x, "avg"), _normal((2, 4, 3, 3))),
        _batchnorm_case(True),
        _batchnorm_case(False),
        Case("cross_entropy", "primitive", _cross_entropy_case),
        _arcface_case(0.0),
        _arcface_case(0.5),
        Case("oni_orthogonalize", "primitive", _oni_case),
        Case("cbam_cal", "model", _cbam_cal_case),
        Case("mfsa", "model", _mfsa_case),
        Case("channel_att_softmax", "model", _channel_softmax_case),
    ]
    for v in (Variant.BASELINE, Variant.CBAM_CAL, Variant.MFSA_CAL, Variant.BASELINE_ADV,
              Variant.CBAM_CAL_ADV, Variant.CHANNEL_ATT_SOFTMAX):
        cases.append(_model_case(v))
    return cases


def numeric_grad(objective: Callable[[], float], x: Tensor) -> np.ndarray:
    """Central differences of a scalar objective w.r.t. every coordinate of x."""
    numeric = np.zeros(x.shape)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + EPS
        up = objective()
        flat[i] = orig - EPS
        down = objective()
        flat[i] = orig
        numeric.reshape(-1)[i] = (up - down) / (2 * EPS)
    return numeric


def check_case(case: Case, seed: int = 0) -> CaseResult:
    start = time.perf_counter()
    rng = np.random.default_rng([seed, sum(map(ord, case.name))])
    with T.precision(np.float64):
        built = case.build(rng)
        leaves, fn = built[:2]
        out = fn()
        cot = rng.standard_normal(out.shape) if out.data.size > 1 else np.ones(out.shape)
        if len(built) > 2:
            run, terms = built[2:]
        else:
            factor = case.factor
            run, terms = fn, [(lambda o: float((o.data * cot).sum()), lambda j: factor)]

        for x in leaves:
            x.grad = None
        T.backward(out, cot)
        worst = 0.0
        n = 0
        for j, x in enumerate(leaves):
            coefs = [(extract, coef(j)) for extract, coef in terms]

            def objective() -> float:
                o = run()
                return sum(c * extract(o) for extract, c in coefs if c)

            analytic = np.zeros(x.shape) if x.grad is None else x.grad
            expected = numeric_grad(objective, x)
            scale = max(np.abs(analytic).max(initial=0), np.abs(expected).max(initial=0), 1e-8)
            worst = max(worst, float(np.abs(analytic - expected).max(initial=0) / scale))
            n += x.data.size
    return CaseResult(case.name, case.tier, worst, case.tol, n, time.perf_counter() - start)


def run_suite(cases: list[Case] | None = None, seed: int = 0,
              report: Callable[[str], None] | None = print) -> list[CaseResult]:
    results = []
    for case in cases or default_cases():
        r = check_case(case, seed)
        results.append(r)
        if report:
            report(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28} {r.tier:<9} "
                   f"max_rel_err={r.max_rel_err:.3e}  tol={r.tol:.0e}  coords={r.n_coords}")
    return results
