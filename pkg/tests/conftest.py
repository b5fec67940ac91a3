import numpy as np
import pytest

from mmformer.config import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_cfg():
    """Three stages at extent 16: 64 tokens per modality, fast forward passes."""
    return ModelConfig(extent=16, channels=(4, 8, 16), token_dim=8, heads=2, ffn_mult=2, groups=2)


@pytest.fixture(scope="session")
def five_stage_cfg():
    return ModelConfig(extent=16, channels=(2, 4, 8, 16, 32), token_dim=8, heads=2, ffn_mult=2, groups=2)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion.

    A test that errors before recording still leaves a FAIL line.
    """
    recorded = []

    def record(criterion: str, ok: bool, detail: str) -> bool:
        recorded.append(f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}")
        return ok

    yield record
    if not recorded:
        recorded.append(f"FAIL  {request.node.name}: raised before reaching a verdict")
    ACCEPTANCE_LINES.extend(recorded)
    print("\n" + "\n".join(recorded))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
