import numpy as np
import pytest

from ncmi.autodiff import Tensor, no_grad


def numeric_grad(fn, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of ``x`` (modified in place, then restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        hi = fn()
        x[i] = orig - step
        lo = fn()
        x[i] = orig
        g[i] = (hi - lo) / (2 * step)
    return g


def rel_err(a, b, floor: float = 1e-6) -> float:
    """Max abs difference over the larger magnitude; ``floor`` absorbs finite-difference
    round-off when the true gradient is (near) zero."""
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.abs(a).max(), np.abs(b).max(), floor)
    return float(np.abs(a - b).max() / scale)


def grad_check(build, arrays: list[np.ndarray], step: float = 1e-5) -> float:
    """Worst relative error between autodiff and finite-difference gradients.

    ``build(*tensors)`` must return a scalar Tensor.
    """
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    build(*leaves).backward()

    def value():
        with no_grad():
            return build(*[Tensor(l.data) for l in leaves]).item()

    worst = 0.0
    for leaf in leaves:
        fd = numeric_grad(value, leaf.data, step)
        got = leaf.grad if leaf.grad is not None else np.zeros_like(fd)
        worst = max(worst, rel_err(got, fd))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_simplex(rng, n, m):
    z = rng.normal(size=(n, m))
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, from ``record_property``."""
    lines = []
    for reports in terminalreporter.stats.values():
        for rep in reports:
            if getattr(rep, "when", None) != "call":
                continue
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" in props:
                status = "PASS" if rep.passed else "FAIL"
                lines.append((props["criterion"], f"criterion {props['criterion']:>2} {status}  {props['detail']}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
