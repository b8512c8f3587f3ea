import numpy as np
import pytest

from congest.systems import Kind, SystemSpec, mnm1_example, parallel_example


def mm1(capacity=5, lam=1.0, mu=1.0, **kw):
    return SystemSpec(kind=Kind.MM1_ADMISSION, arrival_rates=(lam,), service_rates=(mu,),
                      capacities=(capacity,), **kw)


@pytest.fixture(scope="session")
def mnm1():
    return mnm1_example()


@pytest.fixture(scope="session")
def parallel():
    return parallel_example()


@pytest.fixture(scope="session")
def mnm1_traj(mnm1):
    from congest.sim import simulate

    return simulate(mnm1, None, time=10000.0, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def fig3_result():
    """Full-size admission learning curve, shared by the learner and acceptance tests."""
    from congest.experiments import ExperimentConfig, run_experiment

    return run_experiment(ExperimentConfig("fig3", reps=50))


@pytest.fixture(scope="session")
def fig5_result():
    from congest.experiments import ExperimentConfig, run_experiment

    return run_experiment(ExperimentConfig("fig5", reps=50))


ACCEPTANCE: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    """Store one acceptance line and fail the calling test when ``ok`` is false."""
    line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
