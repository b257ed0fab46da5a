"""Gridworlds, observation embeddings and perturbation budgets.

Grid cells are ``(row, col)`` with row 0 at the top. States are the
non-obstacle cells in row-major order. Moves off the grid, into an obstacle,
or outside a cell's allowed action set leave the agent in place.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .errors import ValidationError
from .mdp import MdpSpec

Cell = tuple[int, int]

ACTIONS = ("up", "right", "down", "left")
UP, RIGHT, DOWN, LEFT = range(4)
MOVES = {UP: (-1, 0), RIGHT: (0, 1), DOWN: (1, 0), LEFT: (0, -1)}

DEFAULT_GAMMA = 0.9


def _cell(c) -> Cell:
    return (int(c[0]), int(c[1]))


@dataclass(frozen=True)
class GridworldLayout:
    width: int
    height: int
    obstacles: frozenset = frozenset()
    reward_cells: Mapping[Cell, float] = field(default_factory=dict)
    terminal_cells: frozenset = frozenset()
    movement_restrictions: Mapping[Cell, frozenset] = field(default_factory=dict)
    start_cell: Cell = (0, 0)
    # named cells used by the renderer and by the proofs: green, red, grey, yellow
    landmarks: Mapping[str, Cell] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "obstacles", frozenset(_cell(c) for c in self.obstacles))
        object.__setattr__(self, "terminal_cells", frozenset(_cell(c) for c in self.terminal_cells))
        object.__setattr__(self, "reward_cells",
                           {_cell(c): float(v) for c, v in dict(self.reward_cells).items()})
        object.__setattr__(self, "movement_restrictions",
                           {_cell(c): frozenset(int(a) for a in acts)
                            for c, acts in dict(self.movement_restrictions).items()})
        object.__setattr__(self, "start_cell", _cell(self.start_cell))
        object.__setattr__(self, "landmarks", {k: _cell(v) for k, v in dict(self.landmarks).items()})
        if self.start_cell in self.obstacles:
            raise ValidationError("start cell is an obstacle")
        for c in [self.start_cell, *self.reward_cells, *self.terminal_cells, *self.obstacles]:
            if not self.in_bounds(c):
                raise ValidationError(f"cell {c} is outside the {self.height}x{self.width} grid")
        if self.terminal_cells & self.obstacles or set(self.reward_cells) & self.obstacles:
            raise ValidationError("reward or terminal cell placed on an obstacle")

    def in_bounds(self, c: Cell) -> bool:
        return 0 <= c[0] < self.height and 0 <= c[1] < self.width

    @property
    def cells(self) -> list[Cell]:
        return [(r, c) for r in range(self.height) for c in range(self.width)
                if (r, c) not in self.obstacles]

    def state_index(self) -> dict[Cell, int]:
        return {c: i for i, c in enumerate(self.cells)}

    def next_cell(self, c: Cell, action: int) -> Cell:
        allowed = self.movement_restrictions.get(c)
        if allowed is not None and action not in allowed:
            return c
        dr, dc = MOVES[action]
        nxt = (c[0] + dr, c[1] + dc)
        if not self.in_bounds(nxt) or nxt in self.obstacles:
            return c
        return nxt

    def to_dict(self) -> dict[str, Any]:
        return {
            "width": self.width,
            "height": self.height,
            "obstacles": sorted(list(c) for c in self.obstacles),
            "reward_cells": [[r, c, v] for (r, c), v in sorted(self.reward_cells.items())],
            "terminal_cells": sorted(list(c) for c in self.terminal_cells),
            "movement_restrictions": [[r, c, sorted(a)] for (r, c), a in
                                      sorted(self.movement_restrictions.items())],
            "start_cell": list(self.start_cell),
            "landmarks": {k: list(v) for k, v in sorted(self.landmarks.items())},
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "GridworldLayout":
        return cls(
            width=d["width"], height=d["height"],
            obstacles=frozenset(_cell(c) for c in d.get("obstacles", [])),
            reward_cells={(r, c): v for r, c, v in d.get("reward_cells", [])},
            terminal_cells=frozenset(_cell(c) for c in d.get("terminal_cells", [])),
            movement_restrictions={(r, c): frozenset(a) for r, c, a in
                                   d.get("movement_restrictions", [])},
            start_cell=_cell(d["start_cell"]),
            landmarks={k: _cell(v) for k, v in d.get("landmarks", {}).items()},
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def render(self) -> str:
        """ASCII map: ``#`` obstacle, ``G`` green, ``R`` red, ``X`` grey,
        ``Y`` yellow, ``S`` start, ``.`` empty."""
        marks = {"green": "G", "red": "R", "grey": "X", "yellow": "Y"}
        glyph = {c: marks[k] for k, c in self.landmarks.items() if k in marks}
        rows = []
        for r in range(self.height):
            row = []
            for c in range(self.width):
                cell = (r, c)
                if cell in self.obstacles:
                    row.append("#")
                elif cell in glyph:
                    row.append(glyph[cell])
                elif cell in self.terminal_cells:
                    row.append("R" if self.reward_cells.get(cell, 0.0) > 0 else "X")
                elif cell == self.start_cell:
                    row.append("S")
                else:
                    row.append(".")
            rows.append(" ".join(row))
        return "\n".join(rows)


def gridworld_mdp(layout: GridworldLayout, gamma: float = DEFAULT_GAMMA) -> MdpSpec:
    """Deterministic MDP for ``layout``; rewards are paid on entering a cell."""
    cells = layout.cells
    index = layout.state_index()
    S, A = len(cells), len(ACTIONS)
    P = np.zeros((S, A, S))
    R = np.zeros((S, A))
    terminal = np.array([c in layout.terminal_cells for c in cells])
    for s, c in enumerate(cells):
        for a in range(A):
            if terminal[s]:
                P[s, a, s] = 1.0
                continue
            nxt = layout.next_cell(c, a)
            P[s, a, index[nxt]] = 1.0
            R[s, a] = layout.reward_cells.get(nxt, 0.0) if nxt != c else 0.0
    mu = np.zeros(S)
    mu[index[layout.start_cell]] = 1.0
    return MdpSpec(S, A, P, R, gamma, mu, terminal,
                   state_labels=tuple(f"r{r}c{c}" for r, c in cells), action_labels=ACTIONS)


EMBEDDING_KINDS = ("one_hot", "coordinate", "coordinate_plus_noise_channel")


@dataclass(frozen=True, eq=False)
class ObservationEmbedding:
    """Injective map from states to points of ``[0, 1]^dim``."""

    kind: str
    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.kind not in EMBEDDING_KINDS:
            raise ValidationError(f"unknown embedding kind {self.kind!r}")

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def num_states(self) -> int:
        return self.points.shape[0]

    def encode(self, state: int) -> np.ndarray:
        return self.points[state].copy()

    def decode_nearest(self, observation) -> int:
        x = np.asarray(observation, dtype=float)
        if x.shape != (self.dim,):
            raise ValidationError(f"observation has shape {x.shape}, expected ({self.dim},)")
        d = np.sum((self.points - x) ** 2, axis=1)
        return int(np.argmin(d))

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "points": self.points.tolist()}

    @classmethod
    def from_dict(cls, d) -> "ObservationEmbedding":
        return cls(d["kind"], np.asarray(d["points"], dtype=float))


def make_embedding(layout: GridworldLayout, kind: str = "coordinate") -> ObservationEmbedding:
    cells = layout.cells
    if kind == "one_hot":
        pts = np.eye(len(cells))
    elif kind in ("coordinate", "coordinate_plus_noise_channel"):
        pts = np.array([[(c + 0.5) / layout.width, (r + 0.5) / layout.height] for r, c in cells])
        if kind == "coordinate_plus_noise_channel":
            # constant channel: carries no state information, still perturbable
            pts = np.hstack([pts, np.full((len(cells), 1), 0.5)])
    else:
        raise ValidationError(f"unknown embedding kind {kind!r}")
    return ObservationEmbedding(kind, pts)


NORM_ORDERS = (2.0, math.inf)
BUDGET_MODES = ("continuous_ball", "discrete_set")


def parse_norm(order) -> float:
    if isinstance(order, str):
        order = order.strip().lower()
        order = math.inf if order in ("inf", "linf", "l_inf", "infinity") else float(order.lstrip("l"))
    order = float(order)
    if order not in NORM_ORDERS:
        raise ValidationError(f"norm order must be 2 or inf, got {order}")
    return order


def norm(x, order: float) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.max(np.abs(x))) if order == math.inf else float(np.sqrt(np.sum(x * x)))


@dataclass(frozen=True)
class PerturbationBudget:
    epsilon: float
    norm_order: float = math.inf
    mode: str = "continuous_ball"
    discrete_neighbors: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise ValidationError(f"epsilon must be non-negative, got {self.epsilon}")
        object.__setattr__(self, "epsilon", float(self.epsilon))
        object.__setattr__(self, "norm_order", parse_norm(self.norm_order))
        if self.mode not in BUDGET_MODES:
            raise ValidationError(f"unknown budget mode {self.mode!r}")
        if self.mode == "discrete_set":
            nb = tuple(tuple(sorted(int(x) for x in n)) for n in self.discrete_neighbors)
            for s, n in enumerate(nb):
                if s not in n:
                    raise ValidationError(f"state {s} missing from its own neighbour set")
            object.__setattr__(self, "discrete_neighbors", nb)

    @property
    def is_discrete(self) -> bool:
        return self.mode == "discrete_set"

    def neighbors(self, state: int) -> tuple[int, ...]:
        return self.discrete_neighbors[state]

    def with_epsilon(self, epsilon: float) -> "PerturbationBudget":
        if self.is_discrete:
            raise ValidationError("rebuild discrete budgets with discrete_budget_from_radius")
        return PerturbationBudget(epsilon, self.norm_order, self.mode)


def discrete_budget_from_radius(embedding: ObservationEmbedding, epsilon: float,
                                norm_order=math.inf) -> PerturbationBudget:
    """``N(s) = {s' : ||encode(s') - encode(s)||_p <= epsilon}``."""
    order = parse_norm(norm_order)
    pts = embedding.points
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.max(np.abs(diff), axis=2) if order == math.inf else np.sqrt(np.sum(diff ** 2, axis=2))
    neighbors = tuple(tuple(int(j) for j in np.flatnonzero(dist[i] <= epsilon))
                      for i in range(len(pts)))
    return PerturbationBudget(epsilon, order, "discrete_set", neighbors)


def reachable_cells(layout: GridworldLayout, start: Cell | None = None) -> set[Cell]:
    """Breadth-first search over the move graph, stopping at terminals."""
    start = layout.start_cell if start is None else start
    seen = {start}
    queue = deque([start])
    while queue:
        c = queue.popleft()
        if c in layout.terminal_cells:
            continue
        for a in range(len(ACTIONS)):
            n = layout.next_cell(c, a)
            if n not in seen:
                seen.add(n)
                queue.append(n)
    return seen


def build_random_gridworld(width: int, height: int, obstacle_density: float, seed: int,
                           gamma: float = DEFAULT_GAMMA, embedding_kind: str = "coordinate",
                           max_attempts: int = 100):
    """Random layout with one +1 and one -1 terminal; the start reaches a terminal."""
    if width < 2 or height < 1 or width * height > 400:
        raise ValidationError("need 2 <= width*height <= 400")
    if not 0.0 <= obstacle_density <= 0.4:
        raise ValidationError("obstacle_density must lie in [0, 0.4]")
    rng = np.random.default_rng(seed)
    all_cells = [(r, c) for r in range(height) for c in range(width)]
    n_obstacles = int(round(obstacle_density * width * height))
    for _ in range(max_attempts):
        order = rng.permutation(len(all_cells))
        picks = [all_cells[i] for i in order]
        red, grey, start = picks[0], picks[1], picks[2]
        obstacles = frozenset(picks[3:3 + n_obstacles])
        layout = GridworldLayout(
            width=width, height=height, obstacles=obstacles,
            reward_cells={red: 1.0, grey: -1.0}, terminal_cells=frozenset({red, grey}),
            start_cell=start, landmarks={"red": red, "grey": grey},
        )
        if reachable_cells(layout) & layout.terminal_cells:
            mdp = gridworld_mdp(layout, gamma)
            return mdp, layout, make_embedding(layout, embedding_kind)
    raise ValidationError(f"no layout with a reachable terminal after {max_attempts} attempts")


def _fig3_layout() -> GridworldLayout:
    obstacles = frozenset({(0, 1), (0, 3)})
    # the left two columns only allow moving right or down
    left = {(r, c): frozenset({RIGHT, DOWN}) for r in range(4) for c in range(2)
            if (r, c) not in obstacles}
    return GridworldLayout(
        width=4, height=4, obstacles=obstacles,
        reward_cells={(0, 2): 1.0, (1, 3): -1.0}, terminal_cells=frozenset({(0, 2), (1, 3)}),
        movement_restrictions=left, start_cell=(0, 0),
        landmarks={"green": (1, 1), "red": (0, 2), "grey": (1, 3)},
    )


def build_fig3_gridworld(embedding_kind: str = "coordinate", gamma: float = DEFAULT_GAMMA):
    """4x4 world where the only useful attack is steering right at the green cell.

    ::

        S # R #
        . G . X
        . . . .
        . . . .

    From green, moving right leads to the cell between the +1 (red) and -1
    (grey) terminals; the victim goes up from there, the worst policy goes right.
    """
    layout = _fig3_layout()
    return gridworld_mdp(layout, gamma), layout, make_embedding(layout, embedding_kind)


FIG4_VARIANTS = ("right_down", "up_down", "left_down")


def _fig4_layout(variant: str) -> GridworldLayout:
    obstacles = frozenset({(0, 1), (3, 3)})
    red = (2, 2)
    if variant == "left_down":
        # the -1 terminal moves to the yellow cell
        neg, green, marks = (1, 3), (1, 2), {"yellow": (1, 3)}
    else:
        neg = (1, 1)
        green = (2, 1) if variant == "right_down" else (1, 0)
        marks = {"grey": neg}
    return GridworldLayout(
        width=4, height=4, obstacles=obstacles,
        reward_cells={red: 1.0, neg: -1.0}, terminal_cells=frozenset({red, neg}),
        start_cell=(0, 0), landmarks={"green": green, "red": red, **marks},
    )


def build_fig4_gridworld(variant: str = "right_down", embedding_kind: str = "coordinate",
                         gamma: float = DEFAULT_GAMMA):
    """4x4 world for the strategically-timed untargeted attack.

    ``variant`` names the two actions an untargeted attack can produce at the
    green cell: ``right_down`` and ``up_down`` share one map (grey is the -1
    terminal), ``left_down`` moves the -1 terminal to the yellow cell::

        right_down     up_down        left_down
        S # . .        S # . .        S # . .
        . X . .        G X . .        . . G Y
        . G R .        . . R .        . . R .
        . . . #        . . . #        . . . #
    """
    if variant not in FIG4_VARIANTS:
        raise ValidationError(f"unknown variant {variant!r}; expected one of {FIG4_VARIANTS}")
    layout = _fig4_layout(variant)
    return gridworld_mdp(layout, gamma), layout, make_embedding(layout, embedding_kind)
