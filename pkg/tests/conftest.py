import pytest

from jema.synth import DoeGrid, generate_dataset

TINY_GRID = DoeGrid(velocities=(4.0, 10.0), powers=(800.0, 1400.0, 2000.0))


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    """6 cells x 10 frames; the stratified split leaves 8/1/1 frames per cell."""
    return generate_dataset(TINY_GRID, 10, tmp_path_factory.mktemp("tiny"), seed=11)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(f"criterion {n}: {results[n]}")
