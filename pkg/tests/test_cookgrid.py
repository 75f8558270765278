import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import config
from cookgrid import (DISH, DOWN, EAST, EMPTY_POT, INTERACT, LEFT, NONE, NORTH, ONION, RIGHT, SOUP, SOUTH, STAY,
                      UP, WEST, CookGrid, Player, Pot, parse_layout)
from errors import EpisodeOverError, LayoutParseError


def with_players(state, first, second, pot=None):
    return state._replace(players=(first, second), pot=pot if pot is not None else state.pot)


def test_default_layout_reset(env):
    state, (obs1, obs2) = env.reset(seed=0)
    assert [p.position for p in state.players] == [(1, 1), (1, 3)]
    assert all(p.held == NONE for p in state.players)
    assert state.pot == EMPTY_POT and state.step == 0
    assert env.obs_dim == 71 and obs1.shape == obs2.shape == (71,)
    again, _ = env.reset(seed=0)
    assert again == state


@pytest.mark.parametrize("text, message", [
    ("horizon=10\nCCCCC\nN..-N\nC...C\nCDCSC", "no pot"),
    ("CCPCC\nN..-N\nC...C\nCDCSC", "horizon"),
    ("horizon=10\nCCPCC\nN..-N\nC..C\nCDCSC", "width"),
    ("horizon=10\nCCPCC\nN..-N\nC.X.C\nCDCSC", "unknown tile"),
    ("horizon=10\nCCPCC\nN..-N\nC...C\nCDCS.", "border"),
    ("horizon=10\nCCPPC\nN..-N\nC...C\nCDCSC", "more than one"),
    ("horizon=10\nCCPCC\nN...N\nC...C\nCDCSC", "start"),
])
def test_malformed_layouts(text, message):
    with pytest.raises(LayoutParseError, match=message):
        parse_layout(text)


def test_layout_error_reports_row_and_column():
    with pytest.raises(LayoutParseError) as exc:
        parse_layout("horizon=10\nCCPCC\nN..-N\nC.X.C\nCDCSC")
    assert (exc.value.row, exc.value.column) == (2, 2)


def test_serving_a_soup_pays_twenty(env):
    state, _ = env.reset()
    runner = Player((2, 3), SOUTH, SOUP)
    state = with_players(state, state.players[0], runner)
    state, reward, done, info = env.step(state, (STAY, INTERACT))
    assert reward == config.SOUP_REWARD and info["soups"] == 1
    assert state.players[1].held == NONE and not done


def test_pot_ready_twenty_steps_after_third_onion(env):
    state, _ = env.reset()
    loader = Player((1, 2), NORTH, ONION)
    state = with_players(state, loader, Player((2, 1), NORTH, NONE), pot=Pot(2, 0, False))
    state, reward, _, info = env.step(state, (INTERACT, STAY))
    assert info["events"] == [(0, "load")]
    assert state.pot.onions == 3 and state.pot.timer == 1 and not state.pot.ready
    for tick in range(2, config.COOK_TIME + 1):
        state, reward, _, _ = env.step(state, (STAY, STAY))
        assert reward == 0.0
        assert state.pot.ready == (tick == config.COOK_TIME)
    assert state.pot == Pot(3, config.COOK_TIME, True)


def test_scoop_and_full_service_chain(env):
    state, _ = env.reset()
    state = with_players(state, Player((1, 2), NORTH, DISH), Player((2, 1), NORTH, NONE),
                        pot=Pot(3, config.COOK_TIME, True))
    state, _, _, info = env.step(state, (INTERACT, STAY))
    assert state.players[0].held == SOUP and state.pot == EMPTY_POT
    assert info["events"] == [(0, "scoop")]


def test_subgoal_shaping_rewards(env):
    state, _ = env.reset()
    loader = Player((1, 2), NORTH, ONION)
    _, reward, _, info = env.step(with_players(state, loader, Player((2, 1), NORTH, NONE)), (INTERACT, STAY))
    assert reward == 0.0 and info["shaped"] == config.LOAD_SHAPING

    dish_taker = Player((2, 1), SOUTH, NONE)
    _, _, _, info = env.step(with_players(state, Player((1, 2), NORTH, NONE), dish_taker), (STAY, INTERACT))
    assert info["events"] == [(1, "take_dish")] and info["shaped"] == 0.0
    cooking = with_players(state, Player((1, 2), NORTH, NONE), dish_taker, pot=Pot(3, 5, False))
    _, _, _, info = env.step(cooking, (STAY, INTERACT))
    assert info["shaped"] == config.DISH_SHAPING
    spare = with_players(state, Player((1, 2), NORTH, DISH), dish_taker, pot=Pot(3, 5, False))
    _, _, _, info = env.step(spare, (STAY, INTERACT))
    assert info["shaped"] == 0.0

    ready = with_players(state, Player((1, 2), NORTH, DISH), Player((2, 1), NORTH, NONE),
                         pot=Pot(3, config.COOK_TIME, True))
    _, reward, _, info = env.step(ready, (INTERACT, STAY))
    assert reward == 0.0 and info["shaped"] == config.SCOOP_SHAPING


def test_same_target_blocks_both_players_but_turns_them(env):
    state, _ = env.reset()
    state = with_players(state, Player((1, 1), NORTH, NONE), Player((1, 3), NORTH, NONE))
    state, _, _, _ = env.step(state, (RIGHT, LEFT))
    assert [p.position for p in state.players] == [(1, 1), (1, 3)]
    assert [p.orientation for p in state.players] == [EAST, WEST]


def test_swaps_are_blocked_and_following_is_allowed(env):
    state, _ = env.reset()
    state = with_players(state, Player((1, 1), NORTH, NONE), Player((1, 2), NORTH, NONE))
    swapped, _, _, _ = env.step(state, (RIGHT, LEFT))
    assert [p.position for p in swapped.players] == [(1, 1), (1, 2)]
    followed, _, _, _ = env.step(state, (RIGHT, RIGHT))
    assert [p.position for p in followed.players] == [(1, 2), (1, 3)]


def test_moving_into_a_counter_only_turns_the_player(env):
    state, _ = env.reset()
    state, _, _, _ = env.step(state, (UP, DOWN))
    assert state.players[0].position == (1, 1) and state.players[0].orientation == NORTH
    assert state.players[1].position == (2, 3) and state.players[1].orientation == SOUTH


def test_counter_place_and_pickup(env):
    state, _ = env.reset()
    state = with_players(state, Player((2, 1), WEST, ONION), state.players[1])
    state, _, _, _ = env.step(state, (INTERACT, STAY))
    assert state.counters == (((2, 0), ONION),) and state.players[0].held == NONE
    assert env.onion_inventory(state) == 1
    state, _, _, _ = env.step(state, (INTERACT, STAY))
    assert state.counters == () and state.players[0].held == ONION


def test_invalid_interact_is_a_no_op(env):
    state, _ = env.reset()
    nxt, reward, _, info = env.step(state, (INTERACT, INTERACT))
    assert reward == 0.0 and info["events"] == []
    assert nxt._replace(step=0) == state


def test_episode_ends_at_horizon():
    env = CookGrid(parse_layout("horizon=3\nCCPCC\nN..-N\nC...C\nCDCSC"))
    state, _ = env.reset()
    for t in range(3):
        state, _, done, _ = env.step(state, (STAY, STAY))
        assert done == (t == 2)
    with pytest.raises(EpisodeOverError):
        env.step(state, (STAY, STAY))
    with pytest.raises(ValueError):
        env.step(env.reset()[0], (6, 0))


def test_featurize_layout_and_symmetry(env):
    state, _ = env.reset()
    state = state._replace(pot=Pot(3, 10, False), step=100)
    own, other = env.featurize(state, 0), env.featurize(state, 1)
    block = env.num_floor + 8
    np.testing.assert_array_equal(own[:block], other[block:2 * block])
    np.testing.assert_array_equal(own[block:2 * block], other[:block])
    np.testing.assert_array_equal(own[2 * block:], other[2 * block:])
    held = own[env.num_floor + 4:env.num_floor + 8]
    assert held[NONE] == 1.0 and held.sum() == 1.0
    assert own[2 * block + 3] == 1.0
    assert own[2 * block + 4] == pytest.approx(0.5)
    assert own[2 * block + 6] == pytest.approx(0.25)
    assert np.all((own >= 0.0) & (own <= 1.0))


def test_ready_pot_keeps_a_full_timer(env):
    state, _ = env.reset()
    ready = state._replace(pot=Pot(3, config.COOK_TIME, True))
    assert env.check_invariants(ready) == []
    obs = env.featurize(ready, 0)
    block = env.num_floor + 8
    assert obs[2 * block + 4] == 1.0 and obs[2 * block + 5] == 1.0
    assert env.check_invariants(state._replace(pot=Pot(3, 0, True)))
    assert env.check_invariants(state._replace(pot=Pot(3, config.COOK_TIME, False)))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5)), min_size=1, max_size=400))
def test_random_play_preserves_invariants(actions):
    env = CookGrid.from_file()
    state, _ = env.reset()
    inventory = env.onion_inventory(state)
    for joint in actions:
        state, reward, done, info = env.step(state, joint)
        assert env.check_invariants(state) == []
        assert reward == config.SOUP_REWARD * info["soups"]
        events = [e for _, e in info["events"]]
        expected = inventory + events.count("take_onion") - 3 * events.count("scoop")
        inventory = env.onion_inventory(state)
        assert inventory == expected
        if done:
            break


@pytest.mark.slow
def test_million_step_fuzz():
    env = CookGrid.from_file()
    rng = np.random.default_rng(0)
    state, _ = env.reset()
    for _ in range(1_000_000):
        state, reward, done, info = env.step(state, rng.integers(0, 6, size=2))
        assert reward in (0.0, config.SOUP_REWARD, 2 * config.SOUP_REWARD)
        assert not env.check_invariants(state)
        if done:
            state, _ = env.reset()
