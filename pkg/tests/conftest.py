import numpy as np
import pytest

from fimident.dynsim import load_energization_scenario
from fimident.model import ieee9_preset, init_load_flow
from fimident.oracle import FunctionOracle
from fimident.params import ParamEntry, ParameterVector


@pytest.fixture(scope="session")
def ieee9():
    return ieee9_preset()


@pytest.fixture(scope="session")
def ieee9_op(ieee9):
    return init_load_flow(ieee9)


@pytest.fixture(scope="session")
def coarse_scenario(ieee9):
    return load_energization_scenario(ieee9, t_end=10.0, dt=5e-3)


def linear_oracle(n: int = 100) -> FunctionOracle:
    """y = p * t on t = 1..n."""
    t = np.arange(1.0, n + 1.0)
    return FunctionOracle(lambda v: v[0] * t, n, dt=1.0, t0=1.0)


def scalar(path="p", value=2.0, lower=-np.inf, upper=np.inf, **kw) -> ParameterVector:
    return ParameterVector((ParamEntry(path, value, lower=lower, upper=upper, **kw),))


# acceptance results, printed as one line per criterion at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(n: int, ok: bool, detail: str) -> bool:
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
    return bool(ok)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
