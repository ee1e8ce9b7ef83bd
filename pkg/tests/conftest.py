import pytest

from helpers import SMALL_SPEC
from lipsumlab.data import BenchmarkSpec, make_benchmark
from lipsumlab.pretrain import PretrainConfig, contrastive_pretrain


@pytest.fixture(scope="session")
def small_bench():
    return make_benchmark(SMALL_SPEC)


@pytest.fixture(scope="session")
def default_pretrained():
    bench = make_benchmark(BenchmarkSpec(seed=0))
    return bench, contrastive_pretrain(bench, PretrainConfig(seed=0))


@pytest.fixture(scope="session")
def default_seeds(default_pretrained):
    """``(bench, pretrain_result)`` for seeds 0..4 of the default benchmark."""
    out = [default_pretrained]
    for seed in range(1, 5):
        bench = make_benchmark(BenchmarkSpec(seed=seed))
        out.append((bench, contrastive_pretrain(bench, PretrainConfig(seed=seed))))
    return out


@pytest.fixture(scope="session")
def small_pretrained(small_bench):
    cfg = PretrainConfig(steps=300, batch=4, lr=0.05, hidden=8, dim=4, embed_dim=4)
    return small_bench, contrastive_pretrain(small_bench, cfg)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE, format_line

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(format_line(number))
