import numpy as np
import pytest

from slowfast.model import PAPER_Q, builtin_model


@pytest.fixture
def paper_model():
    return builtin_model("paper_example")


@pytest.fixture
def demo_model():
    return builtin_model("state_dependent_demo")


@pytest.fixture
def paper_q():
    return PAPER_Q.copy()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ALL_MODELS = ["paper_example", "state_dependent_demo", "pure_diffusion"]


def random_points(model, count, seed=0, scale=2.0):
    return np.random.default_rng(seed).normal(scale=scale, size=(count, model.n))


ACCEPTANCE_LINES = []


def acceptance_report(number, title, ok, detail):
    line = f"[criterion {number}] {'PASS' if ok else 'FAIL'} {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1][:-1])):
            terminalreporter.write_line(line)
