"""Finite-difference checks for every autodiff op and the full training loss.

Each case builds fresh leaves at the current default dtype and returns a
scalar closure plus the leaves to perturb.  Op outputs are reduced to a
scalar with a fixed random weighting, so every output entry contributes a
distinct amount to the gradient.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from condvit import autodiff as ad

TOLERANCE = {"float32": 1e-3, "float64": 1e-6}


@dataclass
class GradResult:
    name: str
    max_rel_error: float
    seconds: float

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def _leaf(rng, shape, low=-1.0, high=1.0):
    return ad.parameter(rng.uniform(low, high, size=shape).astype(ad.get_default_dtype()))


def _weighted(out: ad.Tensor, rng) -> Callable[[], ad.Tensor]:
    w = rng.uniform(0.5, 1.5, size=out.shape).astype(ad.get_default_dtype())
    return lambda t: ad.sum_(t * ad.tensor(w.astype(t.dtype)))


def _case(rng, build, *leaves):
    """``build(*leaves) -> Tensor``; scalar = weighted sum of its output."""
    reduce = _weighted(build(*leaves), rng)
    return (lambda: reduce(build(*leaves))), list(leaves)


def op_cases(seed: int = 0) -> dict[str, Callable[[], tuple]]:
    """Name -> zero-argument factory returning ``(scalar_fn, params)``."""
    rng = np.random.Generator(np.random.Philox(seed))

    def c(build, *shapes, low=-1.0, high=1.0):
        return lambda: _case(rng, build, *[_leaf(rng, s, low, high) for s in shapes])

    return {
        "add": c(ad.add, (3, 4), (3, 4)),
        "add_broadcast": c(ad.add, (2, 3, 4), (4,)),
        "sub": c(ad.sub, (3, 4), (3, 4)),
        "mul": c(ad.mul, (3, 4), (3, 4)),
        "mul_broadcast": c(ad.mul, (2, 3, 4), (3, 4)),
        "scale": c(lambda x: ad.scale(x, -2.5), (3, 4)),
        "power": c(lambda x: ad.power(x, 1.5), (3, 4), low=0.5, high=2.0),
        "exp": c(ad.exp, (3, 4)),
        "log": c(ad.log, (3, 4), low=0.5, high=2.0),
        "gelu": c(ad.gelu, (3, 4), low=-3.0, high=3.0),
        "sum_axis": c(lambda x: ad.sum_(x, axis=1), (3, 4)),
        "mean_axis": c(lambda x: ad.mean(x, axis=0, keepdims=True), (3, 4)),
        "reshape": c(lambda x: ad.reshape(x, (4, 3)), (3, 4)),
        "transpose": c(lambda x: ad.transpose(x, (1, 0, 2)), (2, 3, 4)),
        "slice": c(lambda x: ad.slice_(x, (slice(None), 0)), (3, 4)),
        "concat": c(lambda a, b: ad.concat([a, b], axis=1), (2, 3), (2, 2)),
        "expand": c(lambda x: ad.expand(x, (3, 4)), (4,)),
        "take_rows": c(lambda t: ad.take_rows(t, [2, 0, 2, 1]), (3, 4)),
        "matmul": c(ad.matmul, (3, 4), (4, 5)),
        "matmul_batched": c(ad.matmul, (2, 3, 4), (2, 4, 5)),
        "matmul_shared": c(ad.matmul, (2, 3, 4), (4, 5)),
        "softmax": c(lambda x: ad.softmax(x, axis=-1), (3, 4), low=-3.0, high=3.0),
        "log_softmax": c(lambda x: ad.log_softmax(x, axis=-1), (3, 4), low=-3.0, high=3.0),
        "layer_norm": c(ad.layer_norm, (3, 4), (4,), (4,)),
        "l2_normalize": c(lambda x: ad.l2_normalize(x, axis=-1), (3, 4)),
    }


def model_case(seed: int = 0):
    """Tiny CondViT + bidirectional InfoNCE over a 2-pair batch."""
    from condvit.model import Categorical, CondViT, preset
    from condvit.trainer import Temperature, bidirectional_loss

    rng = np.random.Generator(np.random.Philox(seed))
    model = CondViT(preset("tiny"), seed=seed)
    temp = Temperature()
    # preprocessed pixels live in [-1, 1]
    complex_imgs = rng.uniform(-1.0, 1.0, size=(2, 64, 64, 3))
    simple_imgs = rng.uniform(-1.0, 1.0, size=(2, 64, 64, 3))
    conds = [Categorical(0), Categorical(2)]

    def loss():
        za = model.encode_batch(complex_imgs, conds)
        zb = model.encode_batch(simple_imgs, None)
        return bidirectional_loss(za @ zb.T, temp.tensor())

    return loss, list(model.params.values()) + [temp.param]


def run_suite(
    dtype: str = "float32",
    seed: int = 0,
    model_entries: int = 4,
    include_model: bool = True,
) -> list[GradResult]:
    """Max relative error per case at ``dtype``; the model case samples entries."""
    results = []
    with ad.precision(dtype):
        for name, factory in op_cases(seed).items():
            t0 = time.perf_counter()
            fn, params = factory()
            err = ad.grad_check(fn, params, order=4)
            results.append(GradResult(name, err, time.perf_counter() - t0))
        if include_model:
            t0 = time.perf_counter()
            fn, params = model_case(seed)
            err = ad.grad_check(fn, params, entries=model_entries, seed=seed, order=4)
            results.append(GradResult("condvit_infonce", err, time.perf_counter() - t0))
    return results


def format_results(results: list[GradResult], tol: float) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'case'.ljust(width)}  max_rel_error  status"]
    for r in results:
        status = "ok" if r.passed(tol) else "FAIL"
        lines.append(f"{r.name.ljust(width)}  {r.max_rel_error:13.3e}  {status}")
    return "\n".join(lines) + "\n"
