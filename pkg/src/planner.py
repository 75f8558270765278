"""
Planner Oracle and Scripted Pairs.

`SoupPlanner` enumerates every joint state reachable from the start without
leaving items on counters, tabulates the transition of each of the 36 joint
actions with the real `CookGrid.step`, and runs a backward dynamic program
over the horizon. The result is the maximum number of soups a counter-free
team can serve, and `PlannedPolicy` replays the argmax actions of that
program, so its soup count equals the oracle by construction.

`RoleScript` is the hand-written pair: one player hauls onions into the pot,
the other fetches a dish, scoops the soup and serves it.
"""
from collections import deque
from typing import Dict, List, Optional, Tuple

import numpy as np

import config
from cookgrid import (DELTAS, DISH, DISH_DISPENSER, DOWN, GridState, INTERACT, LEFT, NONE, ONION,
                      ONION_DISPENSER, POT, RIGHT, SERVING, SOUP, STAY, UP, CookGrid)
from logger import setup_logger

logger = setup_logger(__name__)

JOINT_ACTIONS = tuple((a, b) for a in range(config.NUM_ACTIONS) for b in range(config.NUM_ACTIONS))
_UNREACHABLE = -100


class SoupPlanner:
    def __init__(self, env: CookGrid):
        self.env = env
        self.index: Dict[tuple, int] = {}
        self.next_state: Optional[np.ndarray] = None
        self.soups: Optional[np.ndarray] = None
        self.values: Optional[np.ndarray] = None

    @staticmethod
    def key(state: GridState) -> tuple:
        return state.players, state.pot

    def enumerate_states(self) -> int:
        """Breadth-first search over counter-free joint states."""
        env = self.env
        start = env.initial_state()
        keys = [self.key(start)]
        self.index = {keys[0]: 0}
        rows_next: List[List[int]] = []
        rows_soups: List[List[int]] = []
        frontier = deque([0])
        while frontier:
            idx = frontier.popleft()
            players, pot = keys[idx]
            state = GridState(players, pot, (), 0)
            next_row, soup_row = [], []
            for joint in JOINT_ACTIONS:
                successor, _, _, info = env.step(state, joint)
                if successor.counters:
                    next_row.append(-1)
                    soup_row.append(0)
                    continue
                succ_key = self.key(successor)
                succ_idx = self.index.get(succ_key)
                if succ_idx is None:
                    succ_idx = len(keys)
                    self.index[succ_key] = succ_idx
                    keys.append(succ_key)
                    frontier.append(succ_idx)
                next_row.append(succ_idx)
                soup_row.append(info["soups"])
            # BFS pops indices in insertion order, so rows line up with state indices
            rows_next.append(next_row)
            rows_soups.append(soup_row)
        self.next_state = np.asarray(rows_next, dtype=np.int32)
        self.soups = np.asarray(rows_soups, dtype=np.int16)
        logger.info(f"Planner enumerated {len(keys)} counter-free states on {env.layout.name}")
        return len(keys)

    def solve(self) -> int:
        """Backward induction; returns the optimal soup count from the start state."""
        if self.next_state is None:
            self.enumerate_states()
        horizon = self.env.horizon
        num_states = self.next_state.shape[0]
        valid = self.next_state >= 0
        safe_next = np.where(valid, self.next_state, 0)
        self.values = np.zeros((horizon + 1, num_states), dtype=np.int8)
        for t in range(horizon - 1, -1, -1):
            q = self.soups + np.where(valid, self.values[t + 1][safe_next], _UNREACHABLE)
            self.values[t] = q.max(axis=1).astype(np.int8)
        return int(self.values[0, 0])

    def action_values(self, state: GridState) -> np.ndarray:
        idx = self.index[self.key(state)]
        t = state.step
        valid = self.next_state[idx] >= 0
        future = np.where(valid, self.values[t + 1][np.where(valid, self.next_state[idx], 0)], _UNREACHABLE)
        return self.soups[idx] + future


class PlannedPolicy:
    """Joint policy replaying the planner's argmax (lowest joint index on ties)."""

    def __init__(self, planner: SoupPlanner):
        if planner.values is None:
            planner.solve()
        self.planner = planner

    def act(self, state: GridState) -> Tuple[int, int]:
        return JOINT_ACTIONS[int(np.argmax(self.planner.action_values(state)))]


class RoleScript:
    """Hand-written pair: `carrier` loads onions, the other player runs dishes and soups."""

    def __init__(self, env: CookGrid, carrier: int = 0):
        self.env = env
        self.carrier = carrier
        self.access = {kind: self._access_points(kind) for kind in (ONION_DISPENSER, DISH_DISPENSER, POT, SERVING)}

    def _access_points(self, kind: str) -> List[Tuple[tuple, int]]:
        """(floor cell, orientation) pairs from which a tile of `kind` can be used."""
        layout = self.env.layout
        points = []
        for cell in layout.floor_cells:
            for orientation, (dr, dc) in enumerate(DELTAS):
                if layout.tile((cell[0] + dr, cell[1] + dc)) == kind:
                    points.append((cell, orientation))
        return points

    def _distances(self, source, blocked) -> Dict[tuple, Tuple[int, Optional[int]]]:
        """BFS over floor cells: cell -> (distance, first move from `source`)."""
        layout = self.env.layout
        seen = {source: (0, None)}
        queue = deque([source])
        while queue:
            cell = queue.popleft()
            dist, first = seen[cell]
            for action, (dr, dc) in ((UP, DELTAS[0]), (DOWN, DELTAS[1]), (LEFT, DELTAS[3]), (RIGHT, DELTAS[2])):
                nxt = (cell[0] + dr, cell[1] + dc)
                if nxt in seen or nxt == blocked or not layout.is_floor(nxt):
                    continue
                seen[nxt] = (dist + 1, action if first is None else first)
                queue.append(nxt)
        return seen

    def _use(self, state: GridState, i: int, kind: str, interact: bool = True) -> int:
        me = state.players[i]
        partner = state.players[1 - i].position
        reach = self._distances(me.position, partner)
        options = [(reach[cell][0], cell, ori) for cell, ori in self.access[kind] if cell in reach]
        if not options:
            return STAY
        _, cell, orientation = min(options)
        if cell != me.position:
            return reach[cell][1]
        if me.orientation != orientation:
            return {0: UP, 1: DOWN, 2: RIGHT, 3: LEFT}[orientation]
        return INTERACT if interact else STAY

    def _carrier(self, state: GridState) -> int:
        held = state.players[self.carrier].held
        if held == NONE:
            return self._use(state, self.carrier, ONION_DISPENSER)
        if held == ONION:
            if state.pot.onions < config.MAX_ONIONS:
                return self._use(state, self.carrier, POT)
            return self._use(state, self.carrier, ONION_DISPENSER, interact=False)
        return STAY

    def _runner(self, state: GridState) -> int:
        runner = 1 - self.carrier
        held = state.players[runner].held
        if held == NONE:
            return self._use(state, runner, DISH_DISPENSER)
        if held == DISH:
            if state.pot.ready:
                return self._use(state, runner, POT)
            return self._use(state, runner, DISH_DISPENSER, interact=False)
        if held == SOUP:
            return self._use(state, runner, SERVING)
        return STAY

    def act(self, state: GridState) -> Tuple[int, int]:
        actions = [STAY, STAY]
        actions[self.carrier] = self._carrier(state)
        actions[1 - self.carrier] = self._runner(state)
        return actions[0], actions[1]


def play_scripted(env: CookGrid, policy) -> int:
    """Runs one full episode of a joint policy; returns the number of soups served."""
    state, _ = env.reset()
    soups = 0
    done = False
    while not done:
        state, _, done, info = env.step(state, policy.act(state))
        soups += info["soups"]
    return soups
