import numpy as np
import pytest

from tdodif.synth import SceneSpec, emit_dataset, SOURCE_MANIFEST
from tdodif.ingest import read_manifest

_ACCEPTANCE: list[str] = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line; the lines are printed at the end of the run."""

    def _report(criterion: int, ok: bool, detail: str) -> None:
        _ACCEPTANCE.append(f"{'PASS' if ok else 'FAIL'}  criterion {criterion:2d}: {detail}")

    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Default synthetic scene: (source manifest, target manifest, spec)."""
    spec = SceneSpec(seed=0)
    out = tmp_path_factory.mktemp("synth")
    target = emit_dataset(spec, out)
    return read_manifest(out / SOURCE_MANIFEST), target, spec
