"""Deterministic 6x6 key-door gridworld with confounder injection.

Cells are indexed row-major: cell = y*6 + x.  Actions: 0 up, 1 down, 2 left,
3 right, 4 pick-key, 5 open-door, 6-7 no-ops.  Opening a door requires the
key and standing on the door cell; the episode succeeds once every door is
open.  Under the training placement rule the door is correlated with the key
quadrant and distractor bits are correlated with the key half; the OOD rule
breaks both correlations and may change the number of doors.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    ACTION_DIM,
    ConfounderContext,
    FactoredState,
    OfflineDataset,
    StateVec,
    Transition,
    make_state,
)

WIDTH = 6
HEIGHT = 6
N_CELLS = WIDTH * HEIGHT

A_UP, A_DOWN, A_LEFT, A_RIGHT, A_PICK, A_OPEN = 0, 1, 2, 3, 4, 5
MOVE_DELTAS = {A_UP: (0, -1), A_DOWN: (0, 1), A_LEFT: (-1, 0), A_RIGHT: (1, 0)}

# Epsilon of the uniform-random mixture for each behavior level, calibrated by
# bisection against the target dataset success rates (random 0.21, medium 0.46,
# expert 0.87) on 6000 validation episodes.  See calibrate_epsilon().
LEVEL_EPSILON = {"random": 0.621, "medium": 0.474, "expert": 0.225}
LEVEL_TARGET = {"random": 0.21, "medium": 0.46, "expert": 0.87}


@dataclass(frozen=True)
class GridConfig:
    width: int = WIDTH
    height: int = HEIGHT
    horizon: int = 15
    n_doors: int = 1
    spurious_level: int = 0
    placement: str = "train"  # "train" or "ood"
    rho: float = 0.9  # target distractor/key-half correlation at train time
    couple_key_door: bool = True  # inject key->door quadrant correlation
    door_coupling: float = 0.9

    def __post_init__(self):
        if self.width * self.height != N_CELLS:
            raise ValueError("grid must be 6x6")
        if self.n_doors < 1 or self.spurious_level < 0:
            raise ValueError("invalid GridConfig")
        if self.placement not in ("train", "ood"):
            raise ValueError(f"unknown placement rule {self.placement!r}")

    def context(self, behavior: str = "expert") -> ConfounderContext:
        return ConfounderContext(
            n_doors=self.n_doors, placement=self.placement,
            spurious_level=self.spurious_level, rho=self.rho, behavior=behavior)


@dataclass(frozen=True)
class UnlockState:
    agent_cell: int
    key_cell: int
    door_cells: tuple[int, ...]  # all door positions, fixed for the episode
    has_key: bool
    doors_open: frozenset[int]
    distractors: tuple[int, ...]
    t: int = 0

    @property
    def closed_doors(self) -> tuple[int, ...]:
        return tuple(c for c in self.door_cells if c not in self.doors_open)

    def factored(self) -> FactoredState:
        return FactoredState(self.agent_cell, self.key_cell, self.closed_doors,
                             self.has_key, self.distractors)

    def to_statevec(self) -> StateVec:
        return make_state(self.factored())


def cell_xy(cell: int) -> tuple[int, int]:
    return cell % WIDTH, cell // WIDTH


def xy_cell(x: int, y: int) -> int:
    return y * WIDTH + x


def manhattan(a: int, b: int) -> int:
    ax, ay = cell_xy(a)
    bx, by = cell_xy(b)
    return abs(ax - bx) + abs(ay - by)


def quadrant(cell: int) -> int:
    x, y = cell_xy(cell)
    return (y // 3) * 2 + (x // 3)


def key_half_indicator(key_cell: int) -> int:
    return int(cell_xy(key_cell)[0] >= WIDTH // 2)


def expert_path_length(agent: int, key: int, doors: tuple[int, ...]) -> int:
    """Steps for the scripted expert: walk to key, pick, then greedily visit doors."""
    steps = manhattan(agent, key) + 1
    pos = key
    remaining = list(doors)
    while remaining:
        nxt = min(remaining, key=lambda c: (manhattan(pos, c), c))
        steps += manhattan(pos, nxt) + 1
        remaining.remove(nxt)
        pos = nxt
    return steps


def reset(cfg: GridConfig, rng: np.random.Generator) -> UnlockState:
    """Sample a start state per the placement rule.

    Train placement correlates the door with the key quadrant and distractors
    with the key half, and resamples until the expert path fits the horizon.
    OOD placement samples doors uniformly and distractors as fair coins.
    """
    for _ in range(10_000):
        agent = int(rng.integers(N_CELLS))
        key = int(rng.integers(N_CELLS))
        if key == agent:
            continue
        taken = {agent, key}
        doors: list[int] = []
        for _ in range(cfg.n_doors):
            if cfg.placement == "train" and cfg.couple_key_door and rng.random() < cfg.door_coupling:
                pool = [c for c in range(N_CELLS)
                        if quadrant(c) == quadrant(key) and c not in taken]
            else:
                pool = [c for c in range(N_CELLS) if c not in taken]
            if not pool:
                pool = [c for c in range(N_CELLS) if c not in taken]
            door = int(pool[rng.integers(len(pool))])
            doors.append(door)
            taken.add(door)
        doors_t = tuple(sorted(doors))
        if cfg.placement == "train":
            length = expert_path_length(agent, key, doors_t)
            if length > cfg.horizon:
                continue
            if cfg.n_doors == 1:
                assert length <= 2 * (WIDTH + HEIGHT), "expert path exceeds grid bound"
        if cfg.placement == "train":
            match_p = (1.0 + cfg.rho) / 2.0
            half = key_half_indicator(key)
            distractors = tuple(
                half if rng.random() < match_p else 1 - half
                for _ in range(cfg.spurious_level))
        else:
            distractors = tuple(int(rng.integers(2)) for _ in range(cfg.spurious_level))
        return UnlockState(agent, key, doors_t, False, frozenset(), distractors, t=0)
    raise RuntimeError("could not sample a feasible reset")


def step(state: UnlockState, a: int, horizon: int = 15) -> tuple[UnlockState, float, bool]:
    """Deterministic dynamics; invalid moves/picks/opens are no-ops."""
    if not 0 <= a < ACTION_DIM:
        raise ValueError(f"action id {a} out of range")
    agent = state.agent_cell
    has_key = state.has_key
    doors_open = state.doors_open
    if a in MOVE_DELTAS:
        dx, dy = MOVE_DELTAS[a]
        x, y = cell_xy(agent)
        nx, ny = x + dx, y + dy
        if 0 <= nx < WIDTH and 0 <= ny < HEIGHT:
            agent = xy_cell(nx, ny)
    elif a == A_PICK:
        if agent == state.key_cell and not has_key:
            has_key = True
    elif a == A_OPEN:
        if has_key and agent in state.door_cells and agent not in doors_open:
            doors_open = doors_open | {agent}
    nxt = replace(state, agent_cell=agent, has_key=has_key,
                  doors_open=frozenset(doors_open), t=state.t + 1)
    solved = len(nxt.closed_doors) == 0
    reward = 1.0 if solved else 0.0
    done = solved or nxt.t >= horizon
    return nxt, reward, done


def expert_action(state: UnlockState) -> int:
    """Greedy shortest-path action toward the key, then the nearest closed door.

    On an obstacle-free grid every distance-reducing move lies on an A*
    shortest path, so greedy Manhattan descent with a fixed direction order is
    an exact shortest-path policy.
    """
    if not state.has_key:
        target = state.key_cell
        if state.agent_cell == target:
            return A_PICK
    else:
        closed = state.closed_doors
        if not closed:
            return A_UP
        target = min(closed, key=lambda c: (manhattan(state.agent_cell, c), c))
        if state.agent_cell == target:
            return A_OPEN
    ax, ay = cell_xy(state.agent_cell)
    tx, ty = cell_xy(target)
    if ay > ty:
        return A_UP
    if ay < ty:
        return A_DOWN
    if ax > tx:
        return A_LEFT
    return A_RIGHT


@dataclass(frozen=True)
class BehaviorPolicy:
    """Epsilon-mixture of the scripted expert and a uniform-random policy."""

    level: str = "expert"
    epsilon: float | None = None  # None = calibrated default for the level

    def __post_init__(self):
        if self.level not in LEVEL_EPSILON:
            raise ValueError(f"unknown behavior level {self.level!r}")

    @property
    def eps(self) -> float:
        return LEVEL_EPSILON[self.level] if self.epsilon is None else self.epsilon

    def action_distribution(self, state: UnlockState) -> np.ndarray:
        probs = np.full(ACTION_DIM, self.eps / ACTION_DIM)
        probs[expert_action(state)] += 1.0 - self.eps
        return probs

    def act(self, state: UnlockState, rng: np.random.Generator) -> int:
        if rng.random() < self.eps:
            return int(rng.integers(ACTION_DIM))
        return expert_action(state)


def behavior_action(pi: BehaviorPolicy, state: UnlockState, rng: np.random.Generator) -> int:
    return pi.act(state, rng)


def rollout_episode(cfg: GridConfig, pi: BehaviorPolicy, episode_id: int,
                    rng: np.random.Generator) -> list[Transition]:
    state = reset(cfg, rng)
    out: list[Transition] = []
    for t in range(cfg.horizon):
        a = pi.act(state, rng)
        nxt, r, done = step(state, a, horizon=cfg.horizon)
        out.append(Transition(state.to_statevec(), a, nxt.to_statevec(), r, done,
                              episode_id, t))
        state = nxt
        if done:
            break
    return out


def episode_seed_rng(root_seed: int, episode: int) -> np.random.Generator:
    """Splittable per-episode stream so parallel collection stays deterministic."""
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(root_seed, spawn_key=(episode,))))


def collect(cfg: GridConfig, pi: BehaviorPolicy, n_episodes: int,
            seed: int) -> OfflineDataset:
    """Roll out n_episodes under the behavior policy into an offline dataset."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    transitions: list[Transition] = []
    contexts: list[ConfounderContext] = []
    for ep in range(n_episodes):
        rng = episode_seed_rng(seed, ep)
        transitions.extend(rollout_episode(cfg, pi, ep, rng))
        contexts.append(cfg.context(behavior=pi.level))
    return OfflineDataset(
        transitions=transitions,
        contexts=contexts,
        behavior_level=pi.level,
        state_dim=110 + cfg.spurious_level,
        action_dim=ACTION_DIM,
        horizon=cfg.horizon,
    )


def measure_success(cfg: GridConfig, eps: float, n_episodes: int, seed: int) -> float:
    pi = BehaviorPolicy(level="expert", epsilon=eps)
    wins = 0
    for ep in range(n_episodes):
        rng = episode_seed_rng(seed, ep)
        episode = rollout_episode(cfg, pi, ep, rng)
        wins += int(any(tr.r == 1.0 for tr in episode))
    return wins / n_episodes


def calibrate_epsilon(target: float, cfg: GridConfig | None = None,
                      n_episodes: int = 2000, seed: int = 12345,
                      iters: int = 18) -> float:
    """Bisection on the mixing rate so the collected success rate hits target."""
    cfg = cfg or GridConfig()
    lo, hi = 0.0, 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        rate = measure_success(cfg, mid, n_episodes, seed)
        if rate > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# --- Dynamics-aware feature-map basis ----------------------------------------
#
# Coordinates are centered and scaled to [-1, 1].  phi merges the agent
# position with the action's movement delta so the bilinear score against the
# mu basis (y1, y2, -|y-center|^2, task bit) peaks at the true successor of a
# local candidate fan; pick/open intent couples to the task bit.  Random
# uniform initialization provably cannot reach this geometry through the
# regression loss alone, so the basis is the Unlock-specific starting point
# that training then refines.

COORD_SCALE = 2.5
_COORD_X = np.array([(c % WIDTH - COORD_SCALE) / COORD_SCALE for c in range(N_CELLS)])
_COORD_Y = np.array([(c // WIDTH - COORD_SCALE) / COORD_SCALE for c in range(N_CELLS)])


def unlock_feature_basis(state_dim: int = 110, action_dim: int = ACTION_DIM,
                         d: int = 7, d_prime: int = 4, quad_weight: float = 0.5,
                         bump_offset: float = 3.0, task_weight: float = 0.5,
                         seed: int = 0):
    """Structured initial weights for the Unlock feature maps.

    The bilinear score of a candidate with successor-agent coordinates y is
    p.y - 0.5|y|^2 + offset (p = agent coordinates plus the action's move
    delta), which peaks exactly at y = p within a candidate fan; the offset
    keeps scores positive so clip-and-renormalize preserves the ranking.
    Extra rows carry small random values for training to use; distractor
    columns start at zero weight.
    """
    from .representation import FeatureMapMu, FeatureMapPhi

    rng = np.random.default_rng(seed)
    w_phi = 0.02 * rng.standard_normal((d, state_dim + action_dim))
    w_mu = 0.02 * rng.standard_normal((d_prime, state_dim))
    agent = slice(0, 36)
    key = slice(36, 72)
    door = slice(72, 108)
    has_key = slice(108, 110)
    acts = slice(state_dim, state_dim + action_dim)
    delta_x = np.zeros(action_dim)
    delta_y = np.zeros(action_dim)
    for a, (dx, dy) in MOVE_DELTAS.items():
        delta_x[a] = dx / COORD_SCALE
        delta_y[a] = dy / COORD_SCALE

    # mu rows: successor-agent coordinates, a centering bump, and the task bit.
    # The key and door weights differ so a has-key flip and a door flip are
    # distinguishable through the single task dimension: pick-intent prefers
    # gaining the key (+0.6) over a door flip (+0.4), while open-intent with
    # key in hand prefers the door flip (+0.4) over losing the key (-0.6).
    w_mu[0, agent] = _COORD_X
    w_mu[1, agent] = _COORD_Y
    w_mu[2, agent] = bump_offset - quad_weight * (_COORD_X ** 2 + _COORD_Y ** 2)
    w_mu[3, :] = 0.0
    w_mu[3, has_key.start + 1] = 1.2 * task_weight   # holding the key
    w_mu[3, door] = -0.8 * task_weight               # each closed door

    # phi rows 0-3 mirror the mu basis through the bilinear pairing
    w_phi[0, agent] = _COORD_X
    w_phi[0, acts] = delta_x
    w_phi[1, agent] = _COORD_Y
    w_phi[1, acts] = delta_y
    w_phi[2, has_key] = 1.0                       # constant: carries the bump weight
    w_phi[3, :] = 0.0
    w_phi[3, state_dim + A_PICK] = task_weight
    w_phi[3, state_dim + A_OPEN] = task_weight
    # intent-free actions mildly disprefer task flips so "stay" wins those ties
    w_phi[3, state_dim + 6] = -0.2 * task_weight
    w_phi[3, state_dim + 7] = -0.2 * task_weight
    # conditioning context for the uncertainty model: key and door coordinates
    if d > 4:
        w_phi[4, key] = _COORD_X
    if d > 5:
        w_phi[5, key] = _COORD_Y
    if d > 6:
        w_phi[6, door] = _COORD_X + 7.0 * _COORD_Y
    return FeatureMapPhi(w_phi), FeatureMapMu(w_mu)


def unlock_mask_init(d: int = 7, d_prime: int = 4) -> np.ndarray:
    """Structured-pairing core matrix matching the basis above."""
    m = np.zeros((d, d_prime))
    for i in range(min(4, d, d_prime)):
        m[i, i] = 1.0
    return m


# --- Factored one-step successor support (normalization hook for planning) ---

def _flip_key(fs: FactoredState) -> FactoredState:
    return replace(fs, has_key=not fs.has_key)


def _flip_door(fs: FactoredState) -> FactoredState:
    if not fs.door_cells:
        return fs
    return replace(fs, door_cells=tuple(c for c in fs.door_cells if c != fs.door_cells[0]))


def _true_successor(fs: FactoredState, a: int) -> FactoredState:
    if a in MOVE_DELTAS:
        dx, dy = MOVE_DELTAS[a]
        x, y = cell_xy(fs.agent_cell)
        nx, ny = x + dx, y + dy
        if 0 <= nx < WIDTH and 0 <= ny < HEIGHT:
            return replace(fs, agent_cell=xy_cell(nx, ny))
        return fs
    if a == A_PICK and fs.agent_cell == fs.key_cell and not fs.has_key:
        return _flip_key(fs)
    if a == A_OPEN and fs.has_key and fs.agent_cell in fs.door_cells:
        return replace(fs, door_cells=tuple(c for c in fs.door_cells if c != fs.agent_cell))
    return fs


def enumerate_candidates(s: StateVec, a: int) -> list[StateVec]:
    """All one-step successors under the known factorization of the dynamics.

    The support is the clamped four-direction moves, a has-key flip and a
    door flip, deduplicated in that order, with the rule-based true successor
    of (s, a) unioned in at the end so normalization always covers it.
    """
    fs = s.factored
    if fs is None:
        raise ValueError("enumerate_candidates requires a factored state")
    cands: list[FactoredState] = []
    for move in (A_UP, A_DOWN, A_LEFT, A_RIGHT):
        cands.append(_true_successor(fs, move))
    cands.append(_flip_key(fs))
    if fs.door_cells:
        cands.append(_flip_door(fs))
    cands.append(_true_successor(fs, a))
    seen: set[FactoredState] = set()
    out: list[StateVec] = []
    for c in cands:
        if c not in seen:
            seen.add(c)
            out.append(make_state(c))
    return out
