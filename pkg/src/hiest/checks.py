"""Finite-difference checks for every primitive and for the full objective on a toy hierarchy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import ForecastBatch
from .gradcheck import GradCheckReport, grad_check
from .graph import SensorGraph, build_hierarchy
from .model import Hiest, HiestConfig
from .training import objective


def toy_graph() -> SensorGraph:
    """Six sensors: triangle 0-1-2 and square 2-3-4-5 sharing cut vertex 2."""
    return SensorGraph.from_edges(6, [(0, 1), (1, 2), (0, 2), (2, 3), (3, 4), (4, 5), (5, 2)])


def toy_config(**overrides) -> HiestConfig:
    base = dict(blocks=1, layers_per_block=2, hidden=3, num_global=2, horizon=2, history=3,
                skip_dim=4, tcn_kernel=2)
    base.update(overrides)
    return HiestConfig(**base)


@dataclass
class ToyProblem:
    model: Hiest
    batch: ForecastBatch


def toy_problem(seed: int = 0, **overrides) -> ToyProblem:
    """6-node / 2-region / 2-global model with one random batch of two windows."""
    rng = np.random.default_rng(seed)
    hier = build_hierarchy(toy_graph())
    cfg = toy_config(**overrides)
    model = Hiest(cfg, hier, seed=seed)
    # nonzero mapping logits so the soft assignment is not at its symmetric point
    model.params["mapping.theta"].data[...] = rng.normal(scale=0.5, size=model.params["mapping.theta"].shape)
    x = rng.normal(size=(2, cfg.history, 6, cfg.in_dim))
    y = rng.normal(loc=50.0, scale=5.0, size=(2, cfg.horizon, 6, cfg.out_dim))
    mask = np.ones_like(y)
    batch = ForecastBatch(x, y, mask, np.array([50.0]), np.array([5.0]))
    return ToyProblem(model, batch)


def objective_check(step: float = 1e-5, tolerance: float = 1e-4, seed: int = 0) -> GradCheckReport:
    toy = toy_problem(seed)
    return grad_check(lambda: objective(toy.model, toy.batch).total, toy.model.params, step, tolerance)


def primitive_checks(step: float = 1e-5, tolerance: float = 1e-4, seed: int = 0) -> dict[str, GradCheckReport]:
    rng = np.random.default_rng(seed)

    def leaf(*shape, low=None):
        data = rng.normal(size=shape)
        if low is not None:
            data = np.abs(data) + low
        return Tensor(data, requires_grad=True)

    a, b = leaf(3, 4), leaf(4, 2)
    e1, e2 = leaf(3, 4), leaf(3, 4)
    pos = leaf(3, 4, low=0.2)
    bias = leaf(4)
    conv_x, conv_w = leaf(2, 3, 7), leaf(2, 3, 2)
    time_x, time_w = leaf(2, 6, 3, 2), leaf(3, 2, 2)
    lead, wide = leaf(2, 3, 4, 2), leaf(2, 3, 2, 4)
    sq = leaf(4, 4, low=0.1)
    rows = leaf(4, 3)

    cases = {
        "matmul": (lambda: ad.sum(ad.matmul(a, b)), [a, b]),
        "matmul_left": (lambda: ad.sum(ad.tanh(ad.matmul(a, lead))), [a, lead]),
        "matmul_right": (lambda: ad.sum(ad.tanh(ad.matmul(wide, b))), [wide, b]),
        "matmul_batched": (lambda: ad.sum(ad.tanh(ad.matmul(wide, lead))), [wide, lead]),
        "add_sub_mul": (lambda: ad.sum(ad.mul(ad.add(e1, e2), ad.sub(e1, e2))), [e1, e2]),
        "scale_neg_scalar": (lambda: ad.sum(ad.add_scalar(ad.neg(ad.scale(e1, 2.5)), 3.0) * e2), [e1, e2]),
        "relu": (lambda: ad.sum(ad.mul(ad.relu(e1), e2)), [e1, e2]),
        "sigmoid": (lambda: ad.sum(ad.mul(ad.sigmoid(e1), e2)), [e1, e2]),
        "tanh": (lambda: ad.sum(ad.mul(ad.tanh(e1), e2)), [e1, e2]),
        "abs": (lambda: ad.sum(ad.mul(ad.abs(e1), e2)), [e1, e2]),
        "log_clip": (lambda: ad.sum(ad.log(ad.clip(pos, 0.3, 1.5))), [pos]),
        "add_bias": (lambda: ad.sum(ad.tanh(ad.add_bias(e1, bias))), [e1, bias]),
        "row_normalize": (lambda: ad.sum(ad.mul(ad.row_normalize(sq), Tensor(np.arange(16.0).reshape(4, 4)))), [sq]),
        "normalize_rows": (lambda: ad.sum(ad.tanh(ad.normalize_rows(rows))), [rows]),
        "softmax": (lambda: ad.sum(ad.mul(ad.softmax(e1, axis=0), e2)), [e1, e2]),
        "sum_mean": (lambda: ad.sum(ad.tanh(ad.mean(lead, axis=(0, 1)))), [lead]),
        "mean_abs": (lambda: ad.mean_abs(e1), [e1]),
        "l2_norm": (lambda: ad.sum(ad.l2_norm(e1, axis=1)), [e1]),
        "reshape_transpose": (lambda: ad.sum(ad.tanh(ad.transpose(ad.reshape(lead, (6, 8)))) * Tensor(np.arange(48.0).reshape(8, 6))), [lead]),
        "slice_pad": (lambda: ad.sum(ad.tanh(ad.pad_axis(ad.slice_axis(lead, 1, 1), 1, 2))), [lead]),
        "dilated_causal_conv1d": (lambda: ad.sum(ad.tanh(ad.dilated_causal_conv1d(conv_x, conv_w, 2))), [conv_x, conv_w]),
        "causal_conv_time": (lambda: ad.sum(ad.tanh(ad.causal_conv_time(time_x, time_w, 2))), [time_x, time_w]),
    }
    return {name: grad_check(f, ps, step, tolerance) for name, (f, ps) in cases.items()}
