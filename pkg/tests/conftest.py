import os

# single-threaded BLAS so determinism checks are meaningful
for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(var, "1")

import pytest  # noqa: E402

_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record ``(passed, detail)`` for a numbered acceptance criterion."""
    results = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(number: int, title: str, passed: bool, detail: str = "") -> None:
        results[number] = (title, passed, detail)

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, passed, detail = results[number]
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)
