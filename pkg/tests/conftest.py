import datetime as dt

import pytest

from free_env.core import Dataset, Sample
from free_env.simulate import build_benchmark
from free_env.train import ModelConfig

TINY_MODEL = ModelConfig(dim=8, layers=1, heads=2, ffn=16, max_len=128, hidden=8, window=10)

WINTER_FEATURES = {"rainfall": 0.0, "air_temperature": -3.36, "solar_radiation": 108.26}


def make_dataset(sites=("s1",), days=10, start=dt.date(2006, 12, 1), observed=True, simulated=True):
    samples = []
    for j, site in enumerate(sites):
        for t in range(days):
            d = start + dt.timedelta(days=t)
            samples.append(Sample(site, d, {"rainfall": float(t % 3), "air_temperature": 1.5 * t - 4 + j,
                                            "solar_radiation": 100.0 + t},
                                  observed_label=(2.0 + 0.5 * t + j) if observed else None,
                                  simulated_label=(1.5 + 0.5 * t + j) if simulated else None))
    return Dataset(samples)


@pytest.fixture(scope="session")
def small_benchmark():
    return build_benchmark(n_sites=2, days=120)


@pytest.fixture(scope="session")
def default_harness(tmp_path_factory):
    """The default synthetic task; pretrained models are cached for the whole session."""
    from free_env.config import RunConfig
    from free_env.evaluation import Harness

    return Harness(RunConfig(cache_dir=str(tmp_path_factory.mktemp("pretrain-cache"))))


_CRITERIA = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line; the lines are echoed at the end of the run."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        _CRITERIA.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
