import pytest

from proxyadapt.instances import generate_instance

# acceptance outcomes, filled by test_acceptance.py and printed at the end
ACCEPTANCE: dict = {}


def record(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'} ({detail})")


@pytest.fixture(scope="session")
def bundle():
    return generate_instance(seed=0)


@pytest.fixture(scope="session")
def small_bundle():
    return generate_instance(seed=1, n_prompts=8, n_responses=6, N=3, D=2, level_sets=3)
