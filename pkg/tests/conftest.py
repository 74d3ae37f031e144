import numpy as np
import pytest

ACCEPTANCE = []   # PASS/FAIL lines from test_acceptance, echoed in the summary

from trinity.synthgen import ACTIONS, CARD_TYPES, EventLog


def random_log(rng, n_events, n_users=5, t0=1_000_000, span=40 * 86400):
    """Sorted random EventLog; copilot_content only in the copilot scenario."""
    user = rng.integers(0, n_users, n_events)
    ts = t0 + rng.integers(0, span, n_events)
    scen = rng.integers(0, 2, n_events)
    card = np.where(scen == 1, rng.integers(0, len(CARD_TYPES), n_events),
                    rng.integers(0, len(CARD_TYPES) - 1, n_events))
    action = rng.integers(0, len(ACTIONS), n_events)
    item = rng.integers(0, 50, n_events)
    order = np.lexsort((action, item, user, ts))
    return EventLog(user_id=user[order], timestamp=ts[order], scenario=scen[order],
                    card_type=card[order], action=action[order], item_id=item[order])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split("]")[1].split(".")[0])):
            terminalreporter.write_line(line)
