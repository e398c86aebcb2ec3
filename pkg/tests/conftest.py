import numpy as np
import pytest

from rankfed.lora import LoraModule, SiteId

SITE = SiteId(0, "Q")


def random_module(rng, d, r, name="m", alpha=None, sites=(SITE,)):
    factors = {s: (rng.normal(size=(r, d)), rng.normal(size=(d, r))) for s in sites}
    return LoraModule(name, r, float(alpha if alpha is not None else 2 * r), factors)


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
