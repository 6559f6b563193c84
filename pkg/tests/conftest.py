import numpy as np
import pytest

from drtune import diffusion as D
from drtune.data import gen_toy_dataset


@pytest.fixture(scope="session")
def tiny():
    """8x8, T=10 denoiser with a short pretraining run; enough for plumbing tests."""
    sched = D.build_linear_schedule(10, 1e-3, 0.3)
    model = D.Denoiser.init((8, 8), sched, np.random.default_rng(0), hidden=32, depth=2)
    data = gen_toy_dataset("shapes", 256, 8, 0).images
    D.pretrain(model, data, sched, 200, 2e-3, np.random.default_rng(1), batch=32, log_every=0)
    return model, sched, D.ddpm_coeffs(sched)


ACCEPTANCE: list[str] = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion; returns the boolean."""
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        ACCEPTANCE.append(line)
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
