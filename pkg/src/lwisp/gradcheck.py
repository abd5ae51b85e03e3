"""Central finite differences as an independent oracle for ``backward()``.

The suites here back the ``gradcheck`` CLI: ``ops`` covers every
differentiable primitive, ``blocks`` the composite layers and ``model`` the
full student with all losses, each on float64 data.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import functional as F
from . import tensor as T
from .losses import LossWeights, overall_loss, structural_loss, teacher_loss, reconstruction_loss
from .model import LwIspModel, ModelConfig, TapSet, TeacherModel
from .nn import CcbCore, ContextualComplement, DownBlock, Fgam, UpStage
from .tensor import Tensor, no_grad, record_kinks

EPS = 1e-4
TOLERANCE = 1e-4
# gradients smaller than this are compared in absolute terms
REL_FLOOR = 1e-6


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, eps: float = EPS) -> np.ndarray:
    """``(f(x + eps*e_i) - f(x - eps*e_i)) / (2*eps)`` for every element ``i``."""
    base = x.data.astype(np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        plus = float(f(Tensor(base)))
        flat[i] = orig - eps
        minus = float(f(Tensor(base)))
        flat[i] = orig
        out[i] = (plus - minus) / (2.0 * eps)
    return grad


def relative_error(analytic, numeric, floor: float = REL_FLOOR) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    checked: int
    skipped: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def check_leaves(
    loss_fn: Callable[[], Tensor],
    leaves: dict[str, Tensor],
    eps: float = EPS,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[CheckResult]:
    """Compare ``backward()`` gradients of ``loss_fn`` against central differences.

    Leaves are perturbed in place. A coordinate whose +eps and -eps
    evaluations take different branches of any non-smooth op (a kink lies
    within eps) is skipped. With ``max_coords`` only that many randomly
    chosen coordinates per leaf are probed.
    """
    for t in leaves.values():
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}

    def evaluate():
        with no_grad(), record_kinks() as kinks:
            value = loss_fn().item()
        return value, kinks

    results = []
    for name, t in leaves.items():
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort((rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False))
        worst, skipped = 0.0, 0
        ga = analytic[name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            plus, kinks_p = evaluate()
            flat[i] = orig - eps
            minus, kinks_m = evaluate()
            flat[i] = orig
            if not _same_branches(kinks_p, kinks_m):
                skipped += 1
                continue
            numeric = (plus - minus) / (2.0 * eps)
            worst = max(worst, float(relative_error(ga[i], numeric)))
        results.append(CheckResult(name, worst, len(coords) - skipped, skipped))
        t.grad = None
    return results


# ---------------------------------------------------------------- suites
def _rand(rng, *shape, low=-2.0, high=2.0):
    return Tensor(rng.uniform(low, high, shape), requires_grad=True)


def _weighted(out: Tensor, rng_seed: int) -> Tensor:
    weights = np.random.default_rng(rng_seed).uniform(-1, 1, out.shape)
    return T.tsum(out * Tensor(weights))


def _op_cases(rng: np.random.Generator):
    """(name, builder) pairs; builders return (inputs, fn(inputs) -> Tensor)."""
    shp = (2, 3, 4, 5)
    cases = []

    def unary(name, fn, low=-2.0, high=2.0, shape=shp):
        cases.append((name, lambda: ([_rand(rng, *shape, low=low, high=high)], lambda a: fn(a[0]))))

    def binary(name, fn, shape_b=shp, low_b=-2.0, high_b=2.0):
        cases.append((
            name,
            lambda: ([_rand(rng, *shp), _rand(rng, *shape_b, low=low_b, high=high_b)], lambda a: fn(a[0], a[1])),
        ))

    binary("add", T.add)
    binary("add_broadcast", T.add, shape_b=(1, 3, 1, 1))
    binary("sub", T.sub, shape_b=(4, 5))
    binary("mul", T.mul)
    binary("div", T.div, low_b=0.5, high_b=2.0)
    unary("pow", lambda x: T.power(x, 0.7), low=0.2, high=2.0)
    unary("square", T.square)
    unary("sigmoid", T.sigmoid)
    unary("relu", T.relu)
    unary("leaky_relu", T.leaky_relu)
    unary("abs", T.tabs)
    unary("clip_min", lambda x: T.clip_min(x, 0.3))
    unary("sum", lambda x: T.tsum(x, axis=(1, 3), keepdims=False))
    unary("mean", lambda x: T.mean(x, axis=2, keepdims=True))
    unary("amax", lambda x: T.amax(x, axis=1))
    unary("reshape", lambda x: T.reshape(x, (6, 20)))
    unary("broadcast_to", lambda x: T.broadcast_to(x, (2, 3, 4, 5)), shape=(3, 1, 5))
    unary("narrow", lambda x: T.narrow(x, 1, 1, 3))
    binary("concat_channels", lambda a, b: T.concat_channels([a, b]), shape_b=(2, 5, 4, 5))
    unary("global_avg_pool", F.global_avg_pool)
    unary("channel_pool_mean", lambda x: F.channel_pool(x, "mean"))
    unary("channel_pool_max", lambda x: F.channel_pool(x, "max"))
    unary("avg_pool2", F.avg_pool2, shape=(2, 3, 5, 6))
    unary("pixel_shuffle", lambda x: F.pixel_shuffle(x, 2), shape=(2, 8, 3, 3))
    unary("pixel_unshuffle", lambda x: F.pixel_unshuffle(x, 2), shape=(2, 2, 4, 6))
    for stride, pad, dil in ((1, 1, 1), (2, 1, 1), (1, 2, 2), (1, 0, 1), (2, 0, 2)):
        cases.append((
            f"conv2d_s{stride}p{pad}d{dil}",
            lambda s=stride, p=pad, d=dil: (
                [_rand(rng, 2, 3, 7, 6), _rand(rng, 4, 3, 3, 3), _rand(rng, 4)],
                lambda a: F.conv2d(a[0], a[1], a[2], s, p, d),
            ),
        ))
    cases.append((
        "conv2d_1x1",
        lambda: ([_rand(rng, 2, 3, 4, 4), _rand(rng, 5, 3, 1, 1), _rand(rng, 5)],
                 lambda a: F.conv2d(a[0], a[1], a[2])),
    ))
    cases.append((
        "broadcast_add",
        lambda: ([_rand(rng, 2, 3, 4, 4), _rand(rng, 3)], lambda a: F.broadcast_add(a[0], a[1])),
    ))
    cases.append((
        "mae_loss",
        lambda: ([_rand(rng, 2, 3, 4, 4), _rand(rng, 2, 3, 4, 4)], lambda a: reconstruction_loss(a[0], a[1])),
    ))
    cases.append((
        "structural_loss",
        lambda: ([_rand(rng, 1, 2, 22, 22, low=0, high=1), Tensor(rng.uniform(0, 1, (1, 2, 22, 22)))],
                 lambda a: structural_loss(a[0], a[1])),
    ))
    cases.append((
        "teacher_loss",
        lambda: ([_rand(rng, 1, 2, 12, 12, low=0, high=1), Tensor(rng.uniform(0, 1, (1, 2, 12, 12)))],
                 lambda a: teacher_loss(a[0], a[1], 0.4)),
    ))
    return cases


def ops_suite(seed: int) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, build in _op_cases(rng):
        inputs, fn = build()
        wseed = int(rng.integers(1 << 31))
        leaves = {f"{name}[{i}]": t for i, t in enumerate(inputs) if t.requires_grad}
        results += check_leaves(lambda: _weighted(fn(inputs), wseed), leaves)
    return results


def _module_leaves(prefix: str, module, inputs: dict) -> dict:
    leaves = {f"{prefix}.{k}": v for k, v in inputs.items()}
    leaves.update({f"{prefix}.{k}": p for k, p in module.named_parameters()})
    return leaves


def _perturb_biases(module, rng) -> None:
    # zero-initialised biases would hide bias-gradient bugs
    for name, p in module.named_parameters():
        if name.endswith("bias"):
            p.data[...] = rng.uniform(-0.5, 0.5, p.shape)


def blocks_suite(seed: int) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    f64 = np.float64
    results = []

    def run(prefix, module, inputs: dict, fn):
        _perturb_biases(module, rng)
        wseed = int(rng.integers(1 << 31))
        leaves = _module_leaves(prefix, module, inputs)
        return check_leaves(lambda: _weighted(fn(), wseed), leaves)

    x = _rand(rng, 2, 4, 6, 6)
    fg = Fgam(4, rng, reduction=2, spatial_kernel=7, dtype=f64)
    results += run("fgam", fg, {"x": x}, lambda: fg(x))

    f1, f2 = _rand(rng, 1, 3, 3, 4), _rand(rng, 1, 5, 3, 4)
    core = CcbCore(3, 5, 2, rng, dtype=f64)
    results += run("ccb_core", core, {"f1": f1, "f2": f2}, lambda: core(f1, f2))

    ctx, base = _rand(rng, 1, 3, 6, 8), _rand(rng, 1, 2, 6, 8)
    comp = ContextualComplement(3, 2, rng, dtype=f64)
    results += run("complement", comp, {"ctx": ctx, "core": base}, lambda: comp(ctx, base))

    xd = _rand(rng, 1, 3, 8, 8)
    down = DownBlock(3, 4, rng, "leaky_relu", dict(reduction=2), dtype=f64)
    results += run("down_block", down, {"x": xd}, lambda: down(xd)[0])

    e, d, c = _rand(rng, 1, 4, 3, 3), _rand(rng, 1, 3, 3, 3), _rand(rng, 1, 2, 6, 6)
    up = UpStage(4, 3, 2, 4, 2, rng, "relu", dtype=f64)
    results += run("up_stage", up, {"enc": e, "dec": d, "ctx": c}, lambda: up(e, d, c))
    return results


TINY_CONFIG = dict(widths=(2, 2, 2, 2), reduction=2, head_width=4, dtype="float64")


def model_suite(seed: int, max_coords: int | None = 3) -> list[CheckResult]:
    """Student + reconstruction, structural and distillation losses on 1x4x16x16."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(seed=seed, **TINY_CONFIG)
    student = LwIspModel(cfg)
    teacher = TeacherModel(cfg)
    _perturb_biases(student, rng)
    taps = TapSet()
    x = Tensor(rng.uniform(0, 1, (1, 4, 16, 16)))
    j = Tensor(rng.uniform(0, 1, (1, 3, 32, 32)))
    with no_grad():
        _, t_taps = teacher(j, taps.teacher)
    weights = LossWeights(alpha=0.4, beta=1.0)

    def loss_fn():
        rgb, s_taps = student(x, taps.student)
        return overall_loss(rgb, j, s_taps, t_taps, weights).total

    leaves = {f"student.{k}": p for k, p in student.named_parameters()}
    return check_leaves(loss_fn, leaves, max_coords=max_coords, rng=rng)


SUITES = {"ops": ops_suite, "blocks": blocks_suite, "model": model_suite}


def run_suite(scope: str, seeds: int = 20, first_seed: int = 0) -> tuple[list[tuple[int, CheckResult]], float]:
    """Run one suite over ``seeds`` consecutive seeds; returns rows and wall time."""
    if scope not in SUITES:
        raise ValueError(f"unknown gradcheck scope {scope!r}; expected one of {sorted(SUITES)}")
    start = time.perf_counter()
    rows = []
    for seed in range(first_seed, first_seed + seeds):
        rows += [(seed, r) for r in SUITES[scope](seed)]
    return rows, time.perf_counter() - start
