"""Finite-difference verification of every differentiable op and of the composed modules.

Each case builds random 64-bit leaves and a scalar function of them. The
scalar is a fixed random projection of the op's output, so every output
element contributes to the checked gradient. The error reported per case is
the worst norm-wise relative error ``|a - n| / max(|a|, |n|)`` across trials
and leaves, with ``n`` from central differences at step 1e-5.

ReLU, max and clamp are not differentiable everywhere. When the forward and
backward one-sided differences of some coordinate disagree by more than
``KINK_TOL`` (relative), the step straddles such a point; that trial is
discarded and a fresh random draw replaces it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .autograd import Tensor, default_dtype
from .autograd import functional as F

STEP = 1e-5
TOLERANCE = 1e-4
KINK_TOL = 1e-3


@dataclass
class GradCheckRow:
    name: str
    max_rel_error: float
    trials: int
    seconds: float
    redrawn: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= TOLERANCE)


def _leaf(array) -> Tensor:
    return Tensor(np.asarray(array, dtype=np.float64), requires_grad=True)


def _project(out: Tensor, rng_seed: int) -> Tensor:
    weights = np.random.default_rng(rng_seed).normal(size=out.shape)
    return F.sum(out * Tensor(weights))


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_leaves(fn: Callable[[], Tensor], leaves: Sequence[Tensor], rng: np.random.Generator,
                 max_coords: Optional[int] = None, step: float = STEP) -> tuple[float, bool]:
    """Compare analytic and central-difference gradients of ``fn()`` for each leaf.

    Returns the worst relative error and whether any perturbation crossed a kink.
    """
    for leaf in leaves:
        leaf.grad = None
    out = fn()
    base = out.item()
    out.backward()
    analytic = [np.zeros(leaf.shape) if leaf.grad is None else leaf.grad.copy() for leaf in leaves]
    worst, kinked = 0.0, False
    for leaf, grad in zip(leaves, analytic):
        flat = leaf.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(len(coords))
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + step
            up = fn().item()
            flat[c] = orig - step
            down = fn().item()
            flat[c] = orig
            numeric[j] = (up - down) / (2 * step)
            fwd, bwd = (up - base) / step, (base - down) / step
            if abs(fwd - bwd) > KINK_TOL * max(abs(fwd), abs(bwd), 1.0):
                kinked = True
        worst = max(worst, relative_error(grad.reshape(-1)[coords], numeric))
    for leaf in leaves:
        leaf.grad = None
    return worst, kinked


# ---------------------------------------------------------------- op cases
# Each factory takes an rng and returns (fn, leaves).

def _away_from_zero(rng, shape, gap=0.1):
    u = rng.normal(size=shape)
    return np.sign(u) * (gap + np.abs(u))


def _distinct(rng, shape):
    """Values with pairwise gaps well above the finite-difference step."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.1 + rng.uniform(-0.02, 0.02, n)).reshape(shape)


def _elementwise(op, make_a, make_b=None):
    def factory(rng):
        a = _leaf(make_a(rng))
        leaves = [a]
        if make_b is not None:
            b = _leaf(make_b(rng))
            leaves.append(b)
        seed = int(rng.integers(1 << 31))
        return (lambda: _project(op(*leaves), seed)), leaves
    return factory


def _normal(*shape):
    return lambda rng: rng.normal(size=shape)


def _positive(*shape):
    return lambda rng: rng.uniform(0.2, 2.0, size=shape)


def _case_conv(rng):
    stride, dilation = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    x = _leaf(rng.normal(size=(2, 3, 7, 6)))
    w = _leaf(rng.normal(size=(4, 3, 3, 3)))
    b = _leaf(rng.normal(size=4))
    seed = int(rng.integers(1 << 31))
    return (lambda: _project(F.conv2d(x, w, b, stride=stride, padding=dilation, dilation=dilation), seed)), [x, w, b]


def _case_batchnorm(rng):
    x = _leaf(rng.normal(size=(3, 4, 3, 3)))
    w, b = _leaf(rng.normal(size=4)), _leaf(rng.normal(size=4))
    mean, var = np.zeros(4), np.ones(4)
    seed = int(rng.integers(1 << 31))
    return (lambda: _project(F.batch_norm(x, w, b, mean, var, True, 0.1, 1e-5), seed)), [x, w, b]


def _case_layernorm(rng):
    x = _leaf(rng.normal(size=(2, 3, 5)))
    w, b = _leaf(rng.normal(size=5)), _leaf(rng.normal(size=5))
    seed = int(rng.integers(1 << 31))
    return (lambda: _project(F.layer_norm(x, w, b), seed)), [x, w, b]


def _case_attention(rng):
    heads, length, dim = 2, 4, 6
    q, k, v = (_leaf(rng.normal(size=(3, length, dim))) for _ in range(3))
    bias = _leaf(rng.normal(size=(heads, length, length)))
    mask = np.where(rng.random((3, length, length)) < 0.2, -100.0, 0.0)
    seed = int(rng.integers(1 << 31))
    return (lambda: _project(F.attention(q, k, v, heads, bias=bias, mask=mask), seed)), [q, k, v, bias]


def _case_window(rng):
    x = _leaf(rng.normal(size=(1, 6, 5, 2)))
    seed = int(rng.integers(1 << 31))

    def fn():
        padded = F.pad(x, [(0, 0), (0, 2), (0, 3), (0, 0)], mode="edge")
        windows = F.window_partition(padded, 4)
        merged = F.window_merge(windows * windows, 4, 8, 8)
        return _project(merged[:, :6, :5, :], seed)
    return fn, [x]


def _case_shape_ops(rng):
    a = _leaf(rng.normal(size=(2, 3, 4)))
    b = _leaf(rng.normal(size=(2, 2, 4)))
    seed = int(rng.integers(1 << 31))

    def fn():
        joined = F.concat([a, b], axis=1)
        moved = F.transpose(F.reshape(joined, (2, 5, 2, 2)), (0, 2, 3, 1))
        return _project(F.roll(moved, (1, -1), (1, 2))[:, ::-1, 1:, :], seed)
    return fn, [a, b]


def _case_take(rng):
    table = _leaf(rng.normal(size=(5, 3)))
    index = rng.integers(0, 5, size=9)
    seed = int(rng.integers(1 << 31))
    return (lambda: _project(F.take(table, index, axis=0), seed)), [table]


def _case_resample(kind):
    def factory(rng):
        seed = int(rng.integers(1 << 31))
        if kind == "bilinear":
            x = _leaf(rng.normal(size=(2, 2, 3, 5)))
            size = (int(rng.integers(2, 9)), int(rng.integers(2, 9)))
            return (lambda: _project(F.resize_bilinear(x, size), seed)), [x]
        if kind == "max_pool":
            x = _leaf(_distinct(rng, (1, 2, 5, 4)))
            return (lambda: _project(F.max_pool2d(x, 2), seed)), [x]
        x = _leaf(rng.normal(size=(2, 3, 5, 4)))
        if kind == "avg_pool":
            return (lambda: _project(F.avg_pool2d(x, 2), seed)), [x]
        return (lambda: _project(F.global_avg_pool2d(x), seed)), [x]
    return factory


def _case_max(rng):
    x = _leaf(_distinct(rng, (3, 4)))
    seed = int(rng.integers(1 << 31))
    return (lambda: _project(F.max(x, axis=1), seed)), [x]


def _case_linear(rng):
    x = _leaf(rng.normal(size=(2, 3, 4)))
    w, b = _leaf(rng.normal(size=(5, 4))), _leaf(rng.normal(size=5))
    seed = int(rng.integers(1 << 31))
    return (lambda: _project(F.linear(x, w, b), seed)), [x, w, b]


def _case_reductions(rng):
    x = _leaf(rng.normal(size=(2, 3, 4)))
    seed = int(rng.integers(1 << 31))
    return (lambda: _project(F.sum(x, axis=(0, 2)) + F.mean(x, axis=2, keepdims=True)[0, :, 0], seed)), [x]


def _case_clamp(rng):
    x = _leaf(rng.uniform(0.0, 1.0, size=(4, 5)))
    x.data[np.abs(x.data - 0.2) < 0.01] += 0.02
    x.data[np.abs(x.data - 0.8) < 0.01] += 0.02
    seed = int(rng.integers(1 << 31))
    return (lambda: _project(F.clamp(x, 0.2, 0.8), seed)), [x]


OP_CASES: dict[str, Callable] = {
    "add": _elementwise(F.add, _normal(3, 4), _normal(1, 4)),
    "sub": _elementwise(F.sub, _normal(2, 3, 4), _normal(3, 1)),
    "mul": _elementwise(F.mul, _normal(3, 4), _normal(3, 1)),
    "div": _elementwise(F.div, _normal(3, 4), _positive(1, 4)),
    "neg": _elementwise(F.neg, _normal(3, 4)),
    "invert": _elementwise(F.invert, _normal(3, 4)),
    "log": _elementwise(F.log, _positive(3, 4)),
    "exp": _elementwise(F.exp, _normal(3, 4)),
    "sqrt": _elementwise(F.sqrt, _positive(3, 4)),
    "relu": _elementwise(F.relu, lambda rng: _away_from_zero(rng, (3, 4))),
    "sigmoid": _elementwise(lambda a: F.sigmoid(a), _normal(3, 4)),
    "clamp": _case_clamp,
    "sum_mean": _case_reductions,
    "max": _case_max,
    "softmax": _elementwise(lambda a: F.softmax(a, axis=-1), _normal(3, 5)),
    "matmul": _elementwise(F.matmul, _normal(2, 3, 4), _normal(4, 5)),
    "linear": _case_linear,
    "conv2d": _case_conv,
    "batch_norm": _case_batchnorm,
    "layer_norm": _case_layernorm,
    "bilinear": _case_resample("bilinear"),
    "avg_pool": _case_resample("avg_pool"),
    "max_pool": _case_resample("max_pool"),
    "global_avg_pool": _case_resample("global_avg_pool"),
    "shape_ops": _case_shape_ops,
    "window_ops": _case_window,
    "take": _case_take,
    "attention": _case_attention,
}


# ---------------------------------------------------------------- composed cases

def _module_case(build, make_inputs, max_coords=12):
    def factory(rng):
        module = build(rng)
        inputs = [_leaf(a) for a in make_inputs(rng)]
        seed = int(rng.integers(1 << 31))
        leaves = inputs + module.parameters()
        return (lambda: _project(module(*inputs), seed)), leaves, max_coords
    return factory


def _af(rng):
    from .fusion import AFConfig, AttentionFusion
    return AttentionFusion(6, 5, rng, AFConfig(channels=4))


def _decoder_head(rng):
    from .autograd import Module
    from .decoder import AuxHeads, MultiHeadBoosting, TopDownDecoder

    class DecoderHead(Module):
        def __init__(self):
            super().__init__()
            self.decoder = TopDownDecoder(4, rng)
            self.aux = AuxHeads(4, rng)
            self.mhb = MultiHeadBoosting(4, 2, rng, dilations=(1, 2))

        def forward(self, f1, f2, f3, f4):
            state = self.decoder([f1, f2, f3, f4])
            outs = self.aux(state, (24, 24)) + self.mhb(state.final_feature, (24, 24)).logits
            return F.concat(outs, axis=1)
    return DecoderHead()


def _decoder_inputs(rng):
    return [rng.normal(size=(2, 4, s, s)) for s in (12, 6, 3, 2)]


def _swin(rng):
    from .semantic import SwinBlock
    return SwinBlock(8, 2, 2, True, 4, rng, mlp_ratio=2)


def _patch_merge(rng):
    from .semantic import PatchMerging
    return PatchMerging(3, 4, rng)


def _basic_block(rng):
    from .detail import BasicBlock
    return BasicBlock(3, 4, 2, rng)


def _loss_case(kind):
    from . import losses

    def factory(rng):
        shape = (2, 1, 4, 4)
        g = (rng.random(shape) < 0.5).astype(np.float64)
        w = rng.uniform(0.5, 2.0, size=shape)
        seed = int(rng.integers(1 << 31))
        if kind == "total_loss":
            from .decoder import PredictionSet
            aux = [_leaf(rng.normal(size=shape)) for _ in range(2)]
            branches = [Tensor(rng.normal(size=shape)) for _ in range(3)]
            selected = int(rng.integers(1, 4))
            branches[selected - 1] = _leaf(rng.normal(size=shape))

            def fn():
                preds = PredictionSet(branches, selected)
                return losses.total_loss(aux, preds, g).total
            return fn, aux + [branches[selected - 1]], None
        p = _leaf(rng.uniform(0.05, 0.95, size=shape))
        if kind == "bce_map":
            return (lambda: _project(losses.bce_map(p, g), seed)), [p], None
        fn = {"wbce": losses.wbce, "wiou": losses.wiou, "boost_loss": losses.boost_loss}[kind]
        return (lambda: fn(p, g, w)), [p], None
    return factory


COMPOSED_CASES: dict[str, Callable] = {
    "af_module": _module_case(_af, lambda rng: [rng.normal(size=(2, 6, 2, 2)), rng.normal(size=(2, 5, 4, 4))]),
    "decoder_mhb": _module_case(_decoder_head, _decoder_inputs),
    "swin_block": _module_case(_swin, lambda rng: [rng.normal(size=(2, 4, 4, 8))]),
    "patch_merging": _module_case(_patch_merge, lambda rng: [rng.normal(size=(1, 3, 3, 3))]),
    "basic_block": _module_case(_basic_block, lambda rng: [rng.normal(size=(2, 3, 6, 6))]),
    "loss_bce_map": _loss_case("bce_map"),
    "loss_wbce": _loss_case("wbce"),
    "loss_wiou": _loss_case("wiou"),
    "loss_boost": _loss_case("boost_loss"),
    "loss_total": _loss_case("total_loss"),
}


def run_case(name: str, seed: int = 0, trials: Optional[int] = None) -> GradCheckRow:
    composed = name in COMPOSED_CASES
    factory = COMPOSED_CASES[name] if composed else OP_CASES[name]
    n = trials if trials is not None else (3 if composed and not name.startswith("loss") else 20)
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    start = time.perf_counter()
    worst, done, redrawn = 0.0, 0, 0
    with default_dtype(np.float64):
        while done < n:
            built = factory(rng)
            fn, leaves = built[0], built[1]
            max_coords = built[2] if len(built) > 2 else None
            err, kinked = check_leaves(fn, leaves, rng, max_coords)
            if kinked and redrawn < 2 * n:
                redrawn += 1
                continue
            worst = max(worst, err)
            done += 1
    return GradCheckRow(name, worst, n, time.perf_counter() - start, redrawn)


def run_all(seed: int = 0, names: Optional[Sequence[str]] = None) -> list[GradCheckRow]:
    names = list(names) if names is not None else list(OP_CASES) + list(COMPOSED_CASES)
    return [run_case(name, seed) for name in names]


def format_report(rows: Sequence[GradCheckRow]) -> str:
    lines = [f"{'case':<18} {'max_rel_err':>12} {'trials':>6} {'redrawn':>7}  status"]
    for row in rows:
        status = "ok" if row.passed else "FAIL"
        lines.append(f"{row.name:<18} {row.max_rel_error:12.3e} {row.trials:6d} {row.redrawn:7d}  {status}")
    return "\n".join(lines)
