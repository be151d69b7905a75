import sys
import time
from dataclasses import dataclass

import numpy as np
import pytest

from hiest.data import WindowSet, split_and_window, standardize, synth_hierarchical
from hiest.graph import Hierarchy, build_hierarchy
from hiest.model import Hiest, HiestConfig
from hiest.training import MetricReport, TrainConfig, TrainResult, evaluate, metric_report, persistence_forecast, train


@dataclass
class Problem:
    hierarchy: Hierarchy
    train: WindowSet
    val: WindowSet
    test: WindowSet


def make_problem(regions=4, per_region=5, patterns=2, steps=2000, seed=0) -> Problem:
    ds = synth_hierarchical(regions, per_region, patterns, steps, seed=seed)
    (tr, va, te), _ = standardize(split_and_window(ds.frame))
    return Problem(build_hierarchy(ds.graph), tr, va, te)


def small_config(**overrides) -> HiestConfig:
    base = dict(blocks=1, layers_per_block=2, hidden=8, num_global=4, skip_dim=8)
    base.update(overrides)
    return HiestConfig(**base)


@pytest.fixture(scope="session")
def tiny_problem() -> Problem:
    return make_problem(3, 4, 2, 400, seed=0)


@dataclass
class SmokeRun:
    result: TrainResult
    report: MetricReport
    baseline: MetricReport
    seconds: float


@pytest.fixture(scope="session")
def smoke_run() -> SmokeRun:
    """Default model, 30 epochs on the 4x5-sensor synthetic set (shared by several tests)."""
    p = make_problem()
    model = Hiest(HiestConfig(), p.hierarchy, seed=0)
    start = time.perf_counter()
    result = train(model, p.train, p.val, TrainConfig(max_epochs=30, patience=30, seed=0))
    report = evaluate(model, p.test)
    seconds = time.perf_counter() - start
    full = p.test.all()
    baseline = metric_report(persistence_forecast(p.test), full.y, full.mask)
    return SmokeRun(result, report, baseline, seconds)


def reports_close(a: MetricReport, b: MetricReport, tol: float = 1e-12) -> bool:
    ra, rb = a.rows(), b.rows()
    if len(ra) != len(rb):
        return False
    for x, y in zip(ra, rb):
        for k in x:
            if k == "horizon":
                if x[k] != y[k]:
                    return False
                continue
            if (x[k] is None) != (y[k] is None):
                return False
            if x[k] is not None and abs(float(x[k]) - float(y[k])) > tol:
                return False
    return True


def logs_close(a: list[dict], b: list[dict], tol: float = 1e-12) -> bool:
    return len(a) == len(b) and all(
        x.keys() == y.keys() and all(np.isclose(x[k], y[k], rtol=0, atol=tol) for k in x) for x, y in zip(a, b)
    )


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
