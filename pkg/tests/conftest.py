import numpy as np
import pytest

from slsdeploy.cli import chain_plant
from slsdeploy.synthesis import SynthesisSpec, synth_of_youla, synth_sf_h2

ACCEPTANCE_KEY = "acceptance_lines"


@pytest.fixture(scope="session")
def chain3():
    return chain_plant(3)


@pytest.fixture(scope="session")
def chain3_sf(chain3):
    return synth_sf_h2(chain3, SynthesisSpec(6)).response


@pytest.fixture(scope="session")
def chain3_of():
    return chain_plant(3, outputs=[0, 2])


@pytest.fixture(scope="session")
def chain3_phiuy(chain3_of):
    return synth_of_youla(chain3_of, SynthesisSpec(6)).response


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per criterion; echoed in the terminal summary."""
    lines = request.config.stash.setdefault(_STASH, [])

    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append((number, line))
        print(line)
        assert ok, line

    return record


_STASH = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_STASH, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)
