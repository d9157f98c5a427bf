"""Built-in verification suites.

* gradient suite: central finite differences for every differentiable op and
  EVP layer, in double precision, with inputs redrawn away from kinks;
* identity suite: exact algebraic identities checked bit-for-bit;
* ablation lattice (``full``): all eight pDoG/tReLU/PNL combinations build,
  take a training step and get evaluated.
"""

from __future__ import annotations

import itertools
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import ops
from .attacks import AttackSpec, accuracy, adversarial_accuracy, fgsm, pgd
from .evp import PNL, EVPConv, maxout_extrema, pdog_forward
from .gradcheck import GradCheckReport, finite_diff_check, sample_away_from_kinks
from .models import ModelConfig, build
from .nn import SqueezeExcite
from .tensor import Parameter, Tensor, precision
from .train import SGD, train_step

GRAD_TOLERANCE = 1e-5
KINK_MARGIN = 1e-2

Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list]]


def _leaf(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _readout(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    """Scalar loss sum(out * R) for a fixed random R of the output's shape."""
    r = Tensor(rng.standard_normal(out.shape))
    return lambda y: ops.sum(ops.mul(y, r))


def _case(op: Callable[..., Tensor], *inputs: Tensor, rng: np.random.Generator):
    read = _readout(op(*inputs), rng)
    return (lambda: read(op(*inputs))), list(inputs)


def _away(rng, shape, margin=KINK_MARGIN, kinks=(0.0,)):
    draw = lambda g: g.standard_normal(shape)
    dist = lambda a: min(np.abs(a - k).min() for k in kinks)
    return sample_away_from_kinks(draw, dist, margin, rng)


def _pair_away(rng, shape):
    """Two arrays with no near-ties (maximum/minimum kinks)."""
    return sample_away_from_kinks(lambda g: (g.standard_normal(shape), g.standard_normal(shape)),
                                  lambda ab: np.abs(ab[0] - ab[1]).min(), KINK_MARGIN, rng)


def _c_add(rng):
    return _case(ops.add, _leaf(rng.standard_normal((2, 3, 4))), _leaf(rng.standard_normal((3, 1))), rng=rng)


def _c_sub(rng):
    return _case(ops.sub, _leaf(rng.standard_normal((2, 3))), _leaf(rng.standard_normal((2, 3))), rng=rng)


def _c_mul(rng):
    return _case(ops.mul, _leaf(rng.standard_normal((2, 3, 2, 2))), _leaf(rng.standard_normal((1, 3, 1, 1))),
                 rng=rng)


def _c_scale(rng):
    return _case(lambda a: ops.scale(a, 1.7), _leaf(rng.standard_normal((3, 4))), rng=rng)


def _c_neg(rng):
    return _case(ops.neg, _leaf(rng.standard_normal((3, 4))), rng=rng)


def _c_abs(rng):
    return _case(ops.abs, _leaf(_away(rng, (3, 4))), rng=rng)


def _c_sign(rng):
    return _case(ops.sign, _leaf(_away(rng, (3, 4))), rng=rng)


def _c_maximum(rng):
    a, b = _pair_away(rng, (3, 4))
    return _case(ops.maximum, _leaf(a), _leaf(b), rng=rng)


def _c_minimum(rng):
    a, b = _pair_away(rng, (3, 4))
    return _case(ops.minimum, _leaf(a), _leaf(b), rng=rng)


def _c_relu(rng):
    return _case(ops.relu, _leaf(_away(rng, (3, 4))), rng=rng)


def _c_sigmoid(rng):
    return _case(ops.sigmoid, _leaf(3 * rng.standard_normal((3, 4))), rng=rng)


def _c_sum(rng):
    return _case(lambda a: ops.sum(a, axis=(0, 2), keepdims=True), _leaf(rng.standard_normal((2, 3, 4))),
                 rng=rng)


def _c_mean(rng):
    return _case(lambda a: ops.mean(a, axis=1), _leaf(rng.standard_normal((2, 3, 4))), rng=rng)


def _c_reshape(rng):
    return _case(lambda a: ops.reshape(a, (4, 6)), _leaf(rng.standard_normal((2, 3, 4))), rng=rng)


def _c_concat(rng):
    return _case(lambda a, b: ops.concat([a, b], axis=1), _leaf(rng.standard_normal((2, 2, 3, 3))),
                 _leaf(rng.standard_normal((2, 3, 3, 3))), rng=rng)


def _c_channel_slice(rng):
    return _case(lambda a: ops.channel_slice(a, 1, 3), _leaf(rng.standard_normal((2, 4, 2, 2))), rng=rng)


def _c_scale_channels(rng):
    return _case(ops.scale_channels, _leaf(rng.standard_normal((2, 3, 3, 3))), _leaf(rng.random((2, 3))),
                 rng=rng)


def _c_conv2d(rng):
    x, w, b = (_leaf(rng.standard_normal(s)) for s in ((2, 3, 5, 5), (4, 3, 3, 3), (4,)))
    return _case(lambda x, w, b: ops.conv2d(x, w, b, stride=1, padding=1), x, w, b, rng=rng)


def _c_conv2d_strided(rng):
    x, w = _leaf(rng.standard_normal((2, 2, 6, 6))), _leaf(rng.standard_normal((3, 2, 3, 3)))
    return _case(lambda x, w: ops.conv2d(x, w, stride=2, padding=1), x, w, rng=rng)


def _c_conv2d_1x1(rng):
    x, w = _leaf(rng.standard_normal((2, 3, 3, 3))), _leaf(rng.standard_normal((2, 3, 1, 1)))
    return _case(lambda x, w: ops.conv2d(x, w, stride=2), x, w, rng=rng)


def _c_depthwise(rng):
    x, w = _leaf(rng.standard_normal((2, 3, 5, 5))), _leaf(rng.standard_normal((3, 1, 3, 3)))
    return _case(lambda x, w: ops.depthwise_conv2d(x, w, stride=1, padding=1), x, w, rng=rng)


def _c_depthwise_strided(rng):
    x, w = _leaf(rng.standard_normal((1, 2, 6, 6))), _leaf(rng.standard_normal((2, 1, 3, 3)))
    return _case(lambda x, w: ops.depthwise_conv2d(x, w, stride=2, padding=1), x, w, rng=rng)


def _c_avg_pool(rng):
    return _case(lambda a: ops.avg_pool2d(a, 2), _leaf(rng.standard_normal((2, 2, 4, 4))), rng=rng)


def _c_gap(rng):
    return _case(ops.global_avg_pool, _leaf(rng.standard_normal((2, 3, 3, 3))), rng=rng)


def _c_linear(rng):
    x, w, b = (_leaf(rng.standard_normal(s)) for s in ((3, 4), (4, 5), (5,)))
    return _case(ops.linear, x, w, b, rng=rng)


def _c_cross_entropy(rng):
    logits = _leaf(2 * rng.standard_normal((4, 5)))
    labels = rng.integers(0, 5, 4)
    return (lambda: ops.softmax_cross_entropy(logits, labels)), [logits]


def _c_batch_norm(train: bool):
    def case(rng):
        x = _leaf(rng.standard_normal((3, 2, 2, 2)) * 2 + 1)
        gamma, beta = _leaf(rng.random(2) + 0.5), _leaf(rng.standard_normal(2))
        stats = ops.RunningStats(2, np.float64)
        stats.mean[...], stats.var[...], stats.updated = rng.standard_normal(2), rng.random(2) + 0.5, True
        return _case(lambda x, g, b: ops.batch_norm(x, g, b, stats, train), x, gamma, beta, rng=rng)
    return case


def _c_trelu(granularity: str):
    def case(rng):
        c = 3
        theta = rng.uniform(0.1, 1.0, c if granularity == "channel" else 1)
        th = theta.reshape(1, -1, 1, 1) if granularity == "channel" else theta.reshape(1, 1, 1, 1)
        x = sample_away_from_kinks(
            lambda g: g.standard_normal((2, c, 3, 3)) * 1.5,
            lambda a: min(np.abs(np.abs(a) - th).min(), np.abs(a).min()), KINK_MARGIN, rng)
        return _case(ops.trelu, _leaf(x), _leaf(theta), rng=rng)
    return case


def _c_pointwise(rng):
    return _case(ops.pointwise_project, _leaf(rng.standard_normal((2, 3, 3, 3))),
                 _leaf(rng.standard_normal((3, 4))), rng=rng)


def _c_spatial_norm(rng):
    return _case(ops.spatial_l2_norm, _leaf(rng.standard_normal((2, 3, 3, 3))), rng=rng)


def _c_lp_normalize(p: float):
    def case(rng):
        return _case(lambda v: ops.lp_normalize(v, p), _leaf(_away(rng, (3, 5), margin=0.05)), rng=rng)
    return case


def _c_pdog(rng):
    x = _leaf(rng.standard_normal((2, 3, 5, 5)))
    w = _leaf(rng.standard_normal((3, 1, 3, 3)) / 3)
    return _case(lambda x, w: ops.concat(pdog_forward(x, w), axis=1), x, w, rng=rng)


def _c_maxout(rng):
    a, b = _pair_away(rng, (2, 3, 3, 3))
    a = np.where(np.abs(a + b) < KINK_MARGIN, a + 4 * KINK_MARGIN, a)  # keep -d0 vs -d1 apart too
    return _case(lambda a, b: ops.concat(maxout_extrema(a, b), axis=1), _leaf(a), _leaf(b), rng=rng)


def _c_se(rng):
    with precision("f64"):
        se = SqueezeExcite(4, rng, reduction=2, min_hidden=2)
    x = sample_away_from_kinks(
        lambda g: _leaf(g.standard_normal((2, 4, 3, 3))),
        lambda x: np.abs(se.reduce(ops.global_avg_pool(x)).data).min(), KINK_MARGIN, rng)
    return _module_case(se, x, rng)


def _module_case(module, x: Tensor, rng):
    params = [x] + module.parameters()
    read = _readout(module(x), rng)
    return (lambda: read(module(x))), params


def _evpconv_kink_distance(block: EVPConv, x: Tensor) -> float:
    st = block.stages(x)
    d = [np.abs(st["d0"].data), np.abs(st["d1"].data)]
    dists = [min(a.min() for a in d)]
    if block.trelu is not None:
        th = np.abs(block.trelu.theta.data).reshape(1, -1, 1, 1)
        dists.append(min(np.abs(a - th).min() for a in d))
    else:
        dists.append(np.abs(st["d0"].data - st["d1"].data).min())
    c = block.cout
    dists.append(np.abs(st["s"].data[:, :c] - st["s"].data[:, c:]).min())
    zcat = ops.concat([st["z0"], st["z1"]], axis=1)
    dists.append(np.abs(block.se.reduce(ops.global_avg_pool(zcat)).data).min())
    return float(min(dists))


def _c_evpconv(use_trelu: bool, stride: int, cin: int, cout: int):
    def case(rng):
        # Redraw block and input together until every kink is at least 2e-3 away.
        for _ in range(1000):
            with precision("f64"):
                block = EVPConv(cin, cout, rng, stride=stride, use_trelu=use_trelu, se_reduction=2,
                                kernel_init="random")
            if use_trelu:
                block.trelu.theta.data[...] = rng.uniform(0.05, 0.3, block.trelu.theta.shape)
            x = Tensor(rng.standard_normal((2, cin, 4, 4)), requires_grad=True)
            if _evpconv_kink_distance(block, x) > 2e-3:
                return _module_case(block, x, rng)
        raise RuntimeError("could not place EVPConv input away from kinks")
    return case


def _c_pnl(rng):
    with precision("f64"):
        layer = PNL(3, rng, out_dim=4, noise=0.3)
    return _module_case(layer, Tensor(rng.standard_normal((2, 3, 3, 3)), requires_grad=True), rng)


GRADIENT_CASES: dict[str, Case] = {
    "add": _c_add, "sub": _c_sub, "mul": _c_mul, "scale": _c_scale, "neg": _c_neg,
    "abs": _c_abs, "sign": _c_sign, "maximum": _c_maximum, "minimum": _c_minimum,
    "relu": _c_relu, "sigmoid": _c_sigmoid, "sum": _c_sum, "mean": _c_mean,
    "reshape": _c_reshape, "concat": _c_concat, "channel_slice": _c_channel_slice,
    "scale_channels": _c_scale_channels, "conv2d": _c_conv2d, "conv2d_stride2": _c_conv2d_strided,
    "conv2d_1x1": _c_conv2d_1x1, "depthwise_conv2d": _c_depthwise,
    "depthwise_conv2d_stride2": _c_depthwise_strided, "avg_pool2d": _c_avg_pool,
    "global_avg_pool": _c_gap, "linear": _c_linear, "softmax_cross_entropy": _c_cross_entropy,
    "batch_norm_train": _c_batch_norm(True), "batch_norm_eval": _c_batch_norm(False),
    "trelu_channel": _c_trelu("channel"), "trelu_block": _c_trelu("block"),
    "pointwise_project": _c_pointwise, "spatial_l2_norm": _c_spatial_norm,
    "lp_normalize_p2": _c_lp_normalize(2.0), "lp_normalize_p3": _c_lp_normalize(3.0),
    "pdog": _c_pdog, "maxout_extrema": _c_maxout, "squeeze_excite": _c_se,
    "evpconv_trelu": _c_evpconv(True, 1, 2, 2), "evpconv_maxout": _c_evpconv(False, 1, 2, 2),
    "evpconv_stride2_adapter": _c_evpconv(True, 2, 3, 2), "pnl": _c_pnl,
}


@dataclass
class SuiteResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0


def gradient_suite(seeds=range(3), tolerance: float = GRAD_TOLERANCE,
                   cases: Optional[dict] = None) -> tuple[SuiteResult, dict[str, float]]:
    """Run every gradient case for every seed; returns the worst error per case."""
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    with precision("f64"):
        for i, (name, make) in enumerate((cases or GRADIENT_CASES).items()):
            for seed in seeds:
                fn, params = make(np.random.default_rng([seed, i]))
                report: GradCheckReport = finite_diff_check(fn, params, tolerance)
                worst[name] = max(worst.get(name, 0.0), report.max_rel_error)
    bad = {k: v for k, v in worst.items() if not v < tolerance}
    detail = f"{len(worst)} cases, max rel err {max(worst.values(), default=0):.2e}"
    if bad:
        detail += "; failing: " + ", ".join(f"{k}={v:.2e}" for k, v in bad.items())
    return SuiteResult("gradients", not bad, detail, time.perf_counter() - t0), worst


def _tiny_model(seed: int, dtype="f32"):
    cfg = ModelConfig(family="evpnet", depth=8, widths=(4, 8), input_size=8, num_classes=3,
                      se_reduction=4)
    model = build(cfg, seed=seed, dtype=dtype)
    rng = np.random.default_rng(seed)
    dt = model.parameters()[0].dtype
    model(Tensor(rng.random((4, 3, 8, 8)).astype(dt)), train=True)  # populate BN statistics
    return model


def identity_trials(trials: int = 1000, seed: int = 0) -> dict[str, int]:
    """Count failures of each exact identity over ``trials`` random draws."""
    rng = np.random.default_rng(seed)
    fails = {"maxout_abs": 0, "trelu_zero_threshold": 0, "pgd1_equals_fgsm": 0, "delta_pdog_zero": 0}
    for _ in range(trials):
        shape = tuple(rng.integers(1, 5, 4))
        scale = 10.0 ** rng.uniform(-3, 3)
        d0 = Tensor((rng.standard_normal(shape) * scale).astype(np.float32))
        d1 = Tensor((rng.standard_normal(shape) * scale).astype(np.float32))
        z0, z1 = maxout_extrema(d0, d1)
        lhs = ops.maximum(z0, z1).data
        rhs = ops.maximum(ops.abs(d0), ops.abs(d1)).data
        fails["maxout_abs"] += not np.array_equal(lhs, rhs)

        x = Tensor((rng.standard_normal(shape) * scale).astype(np.float32))
        zero = Tensor(np.zeros(shape[1], dtype=np.float32))
        fails["trelu_zero_threshold"] += not np.array_equal(ops.trelu(x, zero).data, np.abs(x.data))

    models = [_tiny_model(s) for s in range(10)]
    for t in range(trials):
        model = models[t % len(models)]
        x = rng.random((int(rng.integers(1, 4)), 3, 8, 8)).astype(np.float32)
        y = rng.integers(0, 3, len(x))
        eps = float(rng.integers(1, 17)) / 255
        fails["pgd1_equals_fgsm"] += not np.array_equal(fgsm(model, x, y, eps),
                                                        pgd(model, x, y, eps, eps, 1, "clean"))

    for _ in range(trials):
        cin, cout = (int(v) for v in rng.integers(1, 6, 2))
        stride = int(rng.integers(1, 3))
        block = EVPConv(cin, cout, rng, stride=stride, use_trelu=bool(rng.integers(0, 2)))
        k = block.pdog.weight.shape[-1]
        delta = np.zeros_like(block.pdog.weight.data)
        delta[:, :, k // 2, k // 2] = 1
        block.pdog.weight.data[...] = delta
        x = Tensor(rng.standard_normal((2, cin, 4, 4)).astype(np.float32) * 10)
        out = block(x).data
        fails["delta_pdog_zero"] += not (np.all(out == 0) and np.all(np.isfinite(out)))
    return fails


def identity_suite(trials: int = 1000, seed: int = 0) -> SuiteResult:
    t0 = time.perf_counter()
    fails = identity_trials(trials, seed)
    detail = ", ".join(f"{k}: {v}/{trials} failures" for k, v in fails.items())
    return SuiteResult("identities", not any(fails.values()), detail, time.perf_counter() - t0)


def ablation_configs(base: Optional[ModelConfig] = None) -> list[ModelConfig]:
    """The eight pDoG/tReLU/PNL on-off combinations."""
    base = base or ModelConfig(family="evpnet", depth=11, widths=(8, 16, 32))
    out = []
    for pdog_, trelu_, pnl_ in itertools.product((False, True), repeat=3):
        out.append(ModelConfig(**{**base.to_dict(), "family": "evpnet", "pdog": pdog_, "trelu": trelu_,
                                  "pnl": pnl_}))
    return out


@dataclass
class LatticeRow:
    pdog: bool
    trelu: bool
    pnl: bool
    params: int
    loss: float
    clean_acc: float
    fgsm_acc: float


def ablation_lattice(seed: int = 0, batch: int = 16, eval_n: int = 32, steps: int = 1) -> list[LatticeRow]:
    """Build each ablation, take ``steps`` SGD steps on synthetic data and evaluate."""
    from .data import synth_shapes

    train_set = synth_shapes(batch, seed=seed)
    test_set = synth_shapes(eval_n, seed=seed + 1)
    rows = []
    for cfg in ablation_configs(ModelConfig(family="evpnet", depth=11, widths=(8, 16, 32), num_classes=2)):
        model = build(cfg, seed=seed)
        opt = SGD(model.parameters(), 0.9, 5e-4)
        for _ in range(steps):
            loss, _ = train_step(model, opt, train_set.images, train_set.labels, 0.01)
        t = cfg.toggles()
        rows.append(LatticeRow(
            t["pdog"], t["trelu"], t["pnl"], model.num_parameters(), loss,
            accuracy(model, test_set.images, test_set.labels),
            adversarial_accuracy(model, test_set.images, test_set.labels, AttackSpec("fgsm"), seed=seed)))
    return rows


def run(full: bool = False, seeds=range(3), trials: int = 1000, out=print) -> bool:
    """Run the suites, print one line each, return overall success."""
    ok = True
    grad, _ = gradient_suite(seeds)
    for res in (grad, identity_suite(trials)):
        out(f"[{'PASS' if res.passed else 'FAIL'}] {res.name}: {res.detail} ({res.seconds:.1f}s)")
        ok &= res.passed
    if full:
        t0 = time.perf_counter()
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                rows = ablation_lattice()
            finite = all(np.isfinite(r.loss) for r in rows)
        except Exception as exc:  # any build or step failure fails the lattice
            out(f"[FAIL] ablation lattice: {exc!r}")
            return False
        out("  pdog trelu pnl  params    loss  clean   fgsm")
        for r in rows:
            out(f"  {int(r.pdog):>4} {int(r.trelu):>5} {int(r.pnl):>3} {r.params:>7} {r.loss:7.4f} "
                f"{r.clean_acc:6.3f} {r.fgsm_acc:6.3f}")
        passed = len(rows) == 8 and finite
        out(f"[{'PASS' if passed else 'FAIL'}] ablation lattice: {len(rows)} configurations "
            f"({time.perf_counter() - t0:.1f}s)")
        ok &= passed
    return ok
