import numpy as np
import pytest

from molex import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def check_grads(loss_fn, params, eps=1e-5, rtol=1e-4, atol=1e-7):
    """Compare backward() against central differences for every tensor in ``params``."""
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        numeric = T.numerical_grad(lambda: float(loss_fn().data), p, eps)
        np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol,
                                   err_msg=f"gradient mismatch for {p.name or p.shape}")


# ---------------------------------------------------------------- acceptance reporting

_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one acceptance verdict and fails the test if not ok."""

    def record(number: int, ok: bool, detail: str) -> None:
        _CRITERIA[number] = (bool(ok), detail)
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
