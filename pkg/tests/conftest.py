import sys
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))     # make ``oracles`` importable

from vqann.bench import PRESETS, bench_data, run_bench  # noqa: E402
from vqann.sparse import SparseConfig, train_snocq  # noqa: E402

_SESSION_START = time.perf_counter()
_CRITERIA: list = []


def session_seconds() -> float:
    return time.perf_counter() - _SESSION_START


def pytest_collection_modifyitems(config, items):
    # the whole-suite timing criterion has to see every other test finish first
    last = [it for it in items if it.name.startswith("test_criterion_13")]
    items[:] = [it for it in items if it not in last] + last


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        props = dict(report.user_properties)
        if hasattr(report, "wasxfail"):
            status = "FAIL (known shortfall, xfail)"
        elif report.outcome == "passed":
            status = "PASS"
        else:
            status = "FAIL"
        _, _, num, label = name.split("_", 3)
        _CRITERIA.append((int(num), label, status, props.get("seconds"), props.get("detail", "")))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num, label, status, seconds, detail in sorted(_CRITERIA):
        took = f" [{seconds:.1f}s]" if seconds is not None else ""
        terminalreporter.write_line(f"criterion {num:2d} {label}: {status}{took} {detail}".rstrip())


@dataclass
class DeskBench:
    preset: object
    records: list
    seconds: float

    def by(self, variant):
        return [r for r in self.records if r.variant == variant]

    def data(self, seed):
        return bench_data(self.preset, seed)


@pytest.fixture(scope="session")
def desk_bench() -> DeskBench:
    preset = PRESETS["desk"]
    t0 = time.perf_counter()
    records = run_bench(preset, keep_models=True)
    return DeskBench(preset, records, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def desk_snocq(desk_bench):
    """Per seed: SNOCQ at the default budget S = K*D and at the dense budget M*K*D,
    both with lambda = 0 and the mu validated for NOCQ on the same data."""
    p = desk_bench.preset
    out = {}
    for rec in desk_bench.by("NOCQ"):
        x, _ = desk_bench.data(rec.seed)
        base = SparseConfig(mu=rec.mu, lam=0.0, seed=rec.seed, outer_iters=p.outer_iters)
        t0 = time.perf_counter()
        budget = train_snocq(x, p.m, p.k, base)
        seconds = time.perf_counter() - t0
        dense = train_snocq(x, p.m, p.k, SparseConfig(mu=rec.mu, lam=0.0, seed=rec.seed,
                                                      outer_iters=p.outer_iters,
                                                      s_budget=p.m * p.k * p.d))
        out[rec.seed] = {"budget": budget, "dense": dense, "seconds": seconds}
    return out
