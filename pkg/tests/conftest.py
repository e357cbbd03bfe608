import numpy as np
import pytest

from pneumollm.numeric import Param, Tape, mul, sum_all


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_check(op, shapes, rng, h=1e-5, floor=1e-8):
    """Max relative error of an op's tape gradient against central differences.

    The scalar is ``sum(op(*inputs) * R)`` for a fixed random ``R``, so every
    output entry contributes with a different weight.
    """
    params = [Param(rng.uniform(-1, 1, size=s), name=f"in{i}") for i, s in enumerate(shapes)]
    out_shape = op(*params).shape
    weights = rng.uniform(-1, 1, size=out_shape)

    def f():
        return sum_all(mul(op(*params), Param(weights, trainable=False)))

    with Tape() as tape:
        tape.backward(f())
    worst = 0.0
    for p in params:
        for idx in np.ndindex(*p.shape):
            orig = p.value[idx]
            p.value[idx] = orig + h
            fp = f().item()
            p.value[idx] = orig - h
            fm = f().item()
            p.value[idx] = orig
            num = (fp - fm) / (2 * h)
            ana = p.grad[idx]
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
    return worst


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
