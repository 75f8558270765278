"""
Cooperative Cooking Gridworld.

Two players share a kitchen with one pot, onion and dish dispensers, plain
counters and a serving tile. Three onions in the pot cook for 20 steps into a
soup; scooping it with a dish and delivering it to the serving tile pays the
team 20.

`GridState` is an immutable value and `CookGrid.step` is a pure function of
(state, joint action). Within a step, interact actions resolve first (player
0 before player 1, against pre-move positions and orientations), then
movement, then the pot timer ticks and the step counter advances.

Layout files start with a `horizon=<int>` header followed by the ASCII grid:

    C counter   P pot   N onion dispenser   D dish dispenser   S serving
    . floor     - floor (second player start)

The first player starts on the first `.` in row-major order unless a `1` marks
the cell explicitly (`2` is accepted as a synonym for `-`).

Besides the team reward, `info["shaped"]` carries subgoal rewards for
loading an onion, taking a useful dish and scooping a soup.
"""
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

import config
from errors import EpisodeOverError, LayoutParseError

Cell = Tuple[int, int]

# Actions
UP, DOWN, LEFT, RIGHT, STAY, INTERACT = range(6)
ACTION_NAMES = ("up", "down", "left", "right", "stay", "interact")

# Orientations, in featurization order
NORTH, SOUTH, EAST, WEST = range(4)
DELTAS = ((-1, 0), (1, 0), (0, 1), (0, -1))
ACTION_ORIENTATION = {UP: NORTH, DOWN: SOUTH, LEFT: WEST, RIGHT: EAST}

# Held / counter items
NONE, ONION, DISH, SOUP = range(4)
ITEM_NAMES = ("none", "onion", "dish", "soup")

FLOOR, COUNTER, POT, ONION_DISPENSER, DISH_DISPENSER, SERVING = ".", "C", "P", "N", "D", "S"
_LEGEND = {".": FLOOR, "-": FLOOR, "1": FLOOR, "2": FLOOR,
           "C": COUNTER, "P": POT, "N": ONION_DISPENSER, "D": DISH_DISPENSER, "S": SERVING}


class Player(NamedTuple):
    position: Cell
    orientation: int
    held: int


class Pot(NamedTuple):
    onions: int
    timer: int
    ready: bool


EMPTY_POT = Pot(0, 0, False)


class GridState(NamedTuple):
    """Dynamic state; the tiles themselves are static and live on the `Layout`."""
    players: Tuple[Player, Player]
    pot: Pot
    counters: Tuple[Tuple[Cell, int], ...]
    step: int

    def counter_items(self) -> Dict[Cell, int]:
        return dict(self.counters)


class Layout:
    def __init__(self, tiles: Sequence[str], horizon: int, starts: Tuple[Cell, Cell], name: str = "layout"):
        self.tiles = tuple(tiles)
        self.horizon = horizon
        self.starts = starts
        self.name = name
        self.height = len(self.tiles)
        self.width = len(self.tiles[0])
        cells = [(r, c) for r in range(self.height) for c in range(self.width)]
        self.floor_cells = tuple(cell for cell in cells if self.tile(cell) == FLOOR)
        self.counter_cells = tuple(cell for cell in cells if self.tile(cell) == COUNTER)
        self.pot_cell = next(cell for cell in cells if self.tile(cell) == POT)
        self.floor_index = {cell: i for i, cell in enumerate(self.floor_cells)}
        self.counter_index = {cell: i for i, cell in enumerate(self.counter_cells)}

    def tile(self, cell: Cell) -> str:
        r, c = cell
        if 0 <= r < self.height and 0 <= c < self.width:
            return self.tiles[r][c]
        return COUNTER

    def is_floor(self, cell: Cell) -> bool:
        return self.tile(cell) == FLOOR

    def __repr__(self):
        return f"Layout({self.name}, {self.width}x{self.height}, horizon={self.horizon})"


def parse_layout(text: str, name: str = "layout") -> Layout:
    lines = [line.rstrip() for line in text.splitlines()]
    lines = [line for line in lines if line and not line.lstrip().startswith("#")]
    if not lines:
        raise LayoutParseError("layout is empty")
    header = lines[0].replace(" ", "")
    if not header.startswith("horizon="):
        raise LayoutParseError("first line must be 'horizon=<int>'")
    try:
        horizon = int(header[len("horizon="):])
    except ValueError:
        raise LayoutParseError(f"horizon must be an integer, got '{header}'") from None
    if horizon < 1:
        raise LayoutParseError("horizon must be positive")

    grid = [line.strip() for line in lines[1:]]
    if len(grid) < 3:
        raise LayoutParseError("grid needs at least three rows")
    width = len(grid[0])
    tiles: List[str] = []
    first = second = explicit_first = None
    seen: Dict[str, Cell] = {}
    for r, row in enumerate(grid):
        if len(row) != width:
            raise LayoutParseError(f"row has width {len(row)}, expected {width}", row=r, column=min(len(row), width))
        normalized = []
        for c, ch in enumerate(row):
            if ch not in _LEGEND:
                raise LayoutParseError(f"unknown tile '{ch}'", row=r, column=c)
            tile = _LEGEND[ch]
            if tile == FLOOR and (r in (0, len(grid) - 1) or c in (0, width - 1)):
                raise LayoutParseError("floor cell on the border", row=r, column=c)
            if tile in (POT, SERVING) and tile in seen:
                raise LayoutParseError(f"layout has more than one '{ch}' tile", row=r, column=c)
            seen.setdefault(tile, (r, c))
            if ch == "1":
                explicit_first = (r, c)
            elif ch in "-2":
                if second is not None:
                    raise LayoutParseError("more than one second-player start", row=r, column=c)
                second = (r, c)
            elif ch == "." and first is None:
                first = (r, c)
            normalized.append(tile)
        tiles.append("".join(normalized))

    for tile, label in ((POT, "pot"), (SERVING, "serving"), (ONION_DISPENSER, "onion dispenser"),
                        (DISH_DISPENSER, "dish dispenser")):
        if tile not in seen:
            raise LayoutParseError(f"layout has no {label} tile")
    first = explicit_first or first
    if first is None or second is None:
        raise LayoutParseError("layout must provide two player start cells")
    return Layout(tiles, horizon, (first, second), name=name)


def load_layout(path=None) -> Layout:
    path = Path(path) if path is not None else config.DEFAULT_LAYOUT_PATH
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise LayoutParseError(f"cannot read layout {path}: {exc}") from exc
    return parse_layout(text, name=path.stem)


class CookGrid:
    def __init__(self, layout: Layout, horizon: Optional[int] = None):
        self.layout = layout
        self.horizon = horizon if horizon is not None else layout.horizon
        self.num_floor = len(layout.floor_cells)
        self.num_counters = len(layout.counter_cells)
        self.obs_dim = 2 * (self.num_floor + 8) + 7 + 4 * self.num_counters

    @classmethod
    def from_file(cls, path=None, horizon: Optional[int] = None) -> "CookGrid":
        return cls(load_layout(path), horizon=horizon)

    # --- Episode API ---

    def initial_state(self) -> GridState:
        first, second = self.layout.starts
        return GridState((Player(first, NORTH, NONE), Player(second, NORTH, NONE)), EMPTY_POT, (), 0)

    def reset(self, seed: Optional[int] = None) -> Tuple[GridState, Tuple[np.ndarray, np.ndarray]]:
        """Start-of-episode state; the start is deterministic so `seed` does not change it."""
        state = self.initial_state()
        return state, self.observe(state)

    def is_done(self, state: GridState) -> bool:
        return state.step >= self.horizon

    @staticmethod
    def _dish_useful(state: GridState, pot: Pot, partner: Player) -> bool:
        """A new dish is useful for a non-empty pot when no other dish is in play."""
        spare = partner.held == DISH or any(item == DISH for _, item in state.counters)
        return pot.onions > 0 and not spare

    def step(self, state: GridState, joint: Sequence[int]):
        """Returns (next_state, team_reward, done, info)."""
        if state.step >= self.horizon:
            raise EpisodeOverError(f"episode already ended at step {state.step}")
        actions = (int(joint[0]), int(joint[1]))
        for a in actions:
            if not 0 <= a < config.NUM_ACTIONS:
                raise ValueError(f"action must lie in [0, {config.NUM_ACTIONS}), got {a}")

        tile = self.layout.tile
        players = list(state.players)
        pot = state.pot
        counters = None
        reward = 0.0
        shaped = 0.0
        events: List[Tuple[int, str]] = []

        for i, a in enumerate(actions):
            if a != INTERACT:
                continue
            p = players[i]
            dr, dc = DELTAS[p.orientation]
            target = (p.position[0] + dr, p.position[1] + dc)
            kind = tile(target)
            held = p.held
            if kind == ONION_DISPENSER and held == NONE:
                held = ONION
                events.append((i, "take_onion"))
            elif kind == DISH_DISPENSER and held == NONE:
                held = DISH
                events.append((i, "take_dish"))
                if self._dish_useful(state, pot, players[1 - i]):
                    shaped += config.DISH_SHAPING
            elif kind == POT:
                if held == ONION and pot.onions < config.MAX_ONIONS:
                    pot = Pot(pot.onions + 1, 0, False)
                    held = NONE
                    events.append((i, "load"))
                    shaped += config.LOAD_SHAPING
                elif held == DISH and pot.ready:
                    pot = EMPTY_POT
                    held = SOUP
                    events.append((i, "scoop"))
                    shaped += config.SCOOP_SHAPING
            elif kind == SERVING and held == SOUP:
                reward += config.SOUP_REWARD
                held = NONE
                events.append((i, "serve"))
            elif kind == COUNTER:
                if counters is None:
                    counters = dict(state.counters)
                if held != NONE and target not in counters:
                    counters[target] = held
                    held = NONE
                    events.append((i, "place"))
                elif held == NONE and target in counters:
                    held = counters.pop(target)
                    events.append((i, "pickup"))
            if held != p.held:
                players[i] = p._replace(held=held)

        old = (players[0].position, players[1].position)
        proposed = list(old)
        for i, a in enumerate(actions):
            if a in ACTION_ORIENTATION:
                orientation = ACTION_ORIENTATION[a]
                dr, dc = DELTAS[orientation]
                target = (old[i][0] + dr, old[i][1] + dc)
                if tile(target) == FLOOR:
                    proposed[i] = target
                players[i] = players[i]._replace(orientation=orientation)
        collided = proposed[0] == proposed[1] or (proposed[0] == old[1] and proposed[1] == old[0])
        if not collided:
            for i in (0, 1):
                if proposed[i] != old[i]:
                    players[i] = players[i]._replace(position=proposed[i])

        if pot.onions == config.MAX_ONIONS and not pot.ready:
            timer = pot.timer + 1
            pot = Pot(pot.onions, timer, timer >= config.COOK_TIME)

        next_step = state.step + 1
        counter_items = state.counters if counters is None else tuple(sorted(counters.items()))
        next_state = GridState((players[0], players[1]), pot, counter_items, next_step)
        info = {"soups": sum(1 for _, e in events if e == "serve"), "events": events, "shaped": shaped}
        return next_state, reward, next_step >= self.horizon, info

    # --- Observations ---

    def featurize(self, state: GridState, index: int) -> np.ndarray:
        """
        Own position one-hot, orientation one-hot, held one-hot, the same three
        blocks for the partner, pot onion-count one-hot, timer/20, ready flag,
        step/horizon, then one 4-way item one-hot per counter cell.
        """
        obs = np.zeros(self.obs_dim)
        offset = 0
        for p in (state.players[index], state.players[1 - index]):
            obs[offset + self.layout.floor_index[p.position]] = 1.0
            offset += self.num_floor
            obs[offset + p.orientation] = 1.0
            offset += 4
            obs[offset + p.held] = 1.0
            offset += 4
        pot = state.pot
        obs[offset + pot.onions] = 1.0
        offset += 4
        obs[offset] = pot.timer / config.COOK_TIME
        obs[offset + 1] = 1.0 if pot.ready else 0.0
        obs[offset + 2] = min(state.step / self.horizon, 1.0)
        offset += 3
        items = dict(state.counters)
        for j, cell in enumerate(self.layout.counter_cells):
            obs[offset + 4 * j + items.get(cell, NONE)] = 1.0
        return obs

    def observe(self, state: GridState) -> Tuple[np.ndarray, np.ndarray]:
        return self.featurize(state, 0), self.featurize(state, 1)

    # --- Diagnostics ---

    def onion_inventory(self, state: GridState) -> int:
        """Onions in the pot, in hands and on counters (soups not counted)."""
        held = sum(1 for p in state.players if p.held == ONION)
        stored = sum(1 for _, item in state.counters if item == ONION)
        return state.pot.onions + held + stored

    def check_invariants(self, state: GridState) -> List[str]:
        problems = []
        positions = [p.position for p in state.players]
        if positions[0] == positions[1]:
            problems.append("players share a cell")
        for i, p in enumerate(state.players):
            if not self.layout.is_floor(p.position):
                problems.append(f"player {i} is off the floor at {p.position}")
            if p.held not in (NONE, ONION, DISH, SOUP) or p.orientation not in (NORTH, SOUTH, EAST, WEST):
                problems.append(f"player {i} has an invalid held item or orientation")
        pot = state.pot
        if not 0 <= pot.onions <= config.MAX_ONIONS:
            problems.append(f"pot holds {pot.onions} onions")
        if pot.timer > 0 and pot.onions != config.MAX_ONIONS:
            problems.append("pot timer runs outside cooking")
        if pot.ready != (pot.timer == config.COOK_TIME):
            problems.append(f"pot ready flag disagrees with timer {pot.timer}")
        if not 0 <= pot.timer <= config.COOK_TIME:
            problems.append(f"pot timer {pot.timer} out of range")
        if pot.ready and pot.onions != config.MAX_ONIONS:
            problems.append("ready pot without three onions")
        for cell, item in state.counters:
            if self.layout.tile(cell) != COUNTER or item == NONE:
                problems.append(f"invalid counter entry {cell}: {item}")
        if not 0 <= state.step <= self.horizon:
            problems.append(f"step {state.step} out of range")
        return problems
