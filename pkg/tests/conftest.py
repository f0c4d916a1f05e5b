import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def gradcheck(fn, inputs, eps=1e-6, max_entries=24, seed=0):
    """Worst relative error between backprop and central differences.

    ``fn`` maps Tensors to a Tensor; the scalar checked is sum(fn(...) * r)
    for a fixed random ``r``. At most ``max_entries`` entries per input are
    perturbed.
    """
    from transvert import autodiff as ad

    rng = np.random.default_rng(seed)
    with ad.precision(np.float64):
        ts = [ad.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in inputs]
        out = fn(*ts)
        r = rng.standard_normal(out.shape)

        def loss():
            with ad.no_grad():
                return float((fn(*ts).data * r).sum())

        total = ad.sum(ad.mul(out, ad.Tensor(r)))
        total.backward()
        worst = 0.0
        for t in ts:
            g = np.zeros(t.shape) if t.grad is None else t.grad
            flat = t.data.reshape(-1)
            picks = rng.choice(flat.size, size=min(max_entries, flat.size), replace=False)
            num, ana = [], []
            for i in picks:
                old = flat[i]
                flat[i] = old + eps
                lp = loss()
                flat[i] = old - eps
                lm = loss()
                flat[i] = old
                num.append((lp - lm) / (2 * eps))
                ana.append(g.reshape(-1)[i])
            num, ana = np.array(num), np.array(ana)
            scale = max(np.linalg.norm(num), np.linalg.norm(ana), 1e-8)
            worst = max(worst, float(np.linalg.norm(num - ana) / scale))
    return worst


# (criterion number, line) pairs filled by test_acceptance.py
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
