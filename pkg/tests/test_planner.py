import pytest

from conftest import TINY_LAYOUT
from cookgrid import CookGrid, parse_layout
from planner import JOINT_ACTIONS, PlannedPolicy, RoleScript, SoupPlanner, play_scripted


def test_joint_action_table():
    assert len(JOINT_ACTIONS) == 36
    assert JOINT_ACTIONS[0] == (0, 0) and JOINT_ACTIONS[-1] == (5, 5)


def test_planned_policy_reaches_the_optimum(tiny_env):
    planner = SoupPlanner(tiny_env)
    best = planner.solve()
    assert best >= 1
    assert play_scripted(tiny_env, PlannedPolicy(planner)) == best


def test_role_script_serves_but_never_beats_the_oracle(tiny_env):
    best = SoupPlanner(tiny_env).solve()
    soups = play_scripted(tiny_env, RoleScript(tiny_env, carrier=0))
    assert 1 <= soups <= best


def test_role_script_with_swapped_roles_is_stuck_in_a_corridor(tiny_env):
    # the players cannot pass each other on a one-cell-wide floor
    assert play_scripted(tiny_env, RoleScript(tiny_env, carrier=1)) == 0


def test_short_horizon_has_no_soup():
    env = CookGrid(parse_layout(TINY_LAYOUT.replace("horizon=60", "horizon=20")))
    assert SoupPlanner(env).solve() == 0


@pytest.mark.slow
def test_default_layout_oracle(env):
    planner = SoupPlanner(env)
    best = planner.solve()
    assert env.horizon == 400
    assert best == 13
    assert play_scripted(env, PlannedPolicy(planner)) == best
    assert 3 <= play_scripted(env, RoleScript(env)) <= best
