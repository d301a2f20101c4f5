import numpy as np
import pytest

from simfree.problems import InitialLaw, SocProblem

_CRITERIA = []


def record_criterion(num, title, ok, detail=""):
    _CRITERIA.append((num, title, bool(ok), detail))
    line = f"criterion {num:>2} {'PASS' if ok else 'FAIL'}  {title}  {detail}"
    print(line)
    return ok


@pytest.fixture
def criterion():
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, ok, detail in sorted(_CRITERIA):
        terminalreporter.write_line(f"criterion {num:>2} {'PASS' if ok else 'FAIL'}  {title}  {detail}")


def brownian_problem(d=1, x0=0.0, g=None, f=None, b=None, sigma=None, T=1.0, x0_var=None):
    """Small hand-built problems for oracle tests."""
    sig = np.eye(d) if sigma is None else np.asarray(sigma, dtype=float)
    law = InitialLaw.point(np.full(d, x0)) if x0_var is None else InitialLaw.gaussian(np.full(d, x0), x0_var)
    return SocProblem(
        dim=d, horizon=T,
        base_drift=b or (lambda t, x: np.zeros_like(x)),
        volatility=lambda t: sig,
        running_cost=f,
        terminal_cost=g or (lambda x: np.zeros(x.shape[0])),
        initial_law=law,
        drift_vjp=lambda t, x, v: np.zeros_like(v),
        terminal_cost_grad=lambda x: np.zeros_like(x),
    )


class ConstPolicy:
    def __init__(self, c):
        self.c = np.atleast_1d(np.asarray(c, dtype=float))

    def forward(self, t, x):
        x = np.atleast_2d(x)
        return np.broadcast_to(self.c, x.shape).copy()
