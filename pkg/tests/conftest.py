import numpy as np
import pytest

POINT_MASS = {"components": {"agent1": {"component": "point_mass"}}}

GOAL = {
    "components": {
        "agent1": {
            "component": "point_mass",
            "reward_fns": {"goal": {"reward_type": "root_goal", "sdcomp": "pos",
                                    "target_goal": [1.5, 1.0]}},
        }
    },
    "global": {"horizon": 100},
}

PUSH = {
    "components": {
        "agent1": {"component": "point_mass"},
        "cap1": {
            "component": "singleton",
            "pos": [1, 0],
            "reward_fns": {"goal": {"reward_type": "root_goal", "sdcomp": "vel",
                                    "target_goal": [4, 0]}},
        },
    },
    "edges": {
        "agent1__cap1": {
            "extra_observers": [{"observer_type": "root_vec"}],
            "reward_fns": {"dist": {"reward_type": "root_dist", "scale": 0.1}},
        }
    },
}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
