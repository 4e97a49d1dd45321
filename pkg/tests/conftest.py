import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from xrpo.network import ieee33  # noqa: E402


@pytest.fixture(scope="session")
def net33():
    return ieee33()


@pytest.fixture
def toy_dict():
    """Slack plus one load bus, one branch, a tap changer and one bank."""
    return {
        "name": "toy",
        "base_kv": 12.66,
        "base_mva": 10.0,
        "v_min_pu": 0.9,
        "v_max_pu": 1.1,
        "buses": [{"id": 1, "kind": "slack"}, {"id": 2, "kind": "load", "p_load_kw": 800.0, "q_load_kvar": 600.0}],
        "branches": [{"from_bus": 1, "to_bus": 2, "r_ohm": 2.0, "x_ohm": 1.5}],
        "transformer": {"at_branch": 1, "tap_min": -4, "tap_max": 4, "tap_step_frac": 0.0125},
        "capacitor_banks": [{"at_bus": 2, "n_steps": 9, "kvar_per_step": 100.0}],
        "dg_units": [],
    }


VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request):
    """Record one acceptance line; the terminal summary prints them all in order."""
    store = request.config.stash.setdefault(VERDICTS, {})

    def record(number: int, ok: bool, text: str) -> bool:
        store[number] = f"{'PASS' if ok else 'FAIL'} criterion {number}: {text}"
        print(store[number])
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(VERDICTS, {})
    if store:
        terminalreporter.section("acceptance criteria")
        for number in sorted(store):
            terminalreporter.write_line(store[number])
