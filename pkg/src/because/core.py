"""Shared MDP vocabulary: states, transitions, episodes, datasets.

States for the key-door gridworld are 110-dimensional binary vectors laid out as
four one-hot blocks (agent cell, key cell, closed-door cells, has-key flag) plus
optional appended distractor bits.  The door block lists the doors that are
still closed, so the goal predicate is simply "door block empty".
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

GRID_CELLS = 36
BASE_STATE_DIM = 110  # 36 agent + 36 key + 36 door + 2 has_key
ACTION_DIM = 8

AGENT_BLOCK = slice(0, 36)
KEY_BLOCK = slice(36, 72)
DOOR_BLOCK = slice(72, 108)
HAS_KEY_BLOCK = slice(108, 110)

DATASET_SCHEMA = "because-dataset-v1"


class ValidationError(ValueError):
    """An invariant of a domain type was violated."""


class DatasetFormatError(ValueError):
    """A dataset file could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class FactoredState:
    """Compact record of a gridworld state.

    ``door_cells`` holds the cells of doors that are still closed; opened
    doors drop out of the tuple.  ``distractors`` are the appended spurious
    binary dimensions (empty when spurious_level = 0).
    """

    agent_cell: int
    key_cell: int
    door_cells: tuple[int, ...]
    has_key: bool
    distractors: tuple[int, ...] = ()

    def sa_key(self, action: int) -> tuple:
        return (self.agent_cell, self.key_cell, self.door_cells, self.has_key,
                self.distractors, action)


@dataclass(frozen=True)
class StateVec:
    """Dense state vector, optionally paired with its factored form.

    For the discrete environment the values are binary and the factored form
    round-trips losslessly.  Synthetic benchmark datasets may carry real-valued
    vectors with ``factored=None``.
    """

    values: np.ndarray
    factored: FactoredState | None = None

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))

    def __eq__(self, other):
        if not isinstance(other, StateVec):
            return NotImplemented
        return np.array_equal(self.values, other.values) and self.factored == other.factored

    def __hash__(self):
        return hash((self.values.tobytes(), self.factored))

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


def factored_to_values(fs: FactoredState) -> np.ndarray:
    vec = np.zeros(BASE_STATE_DIM + len(fs.distractors), dtype=np.float64)
    vec[fs.agent_cell] = 1.0
    vec[36 + fs.key_cell] = 1.0
    for cell in fs.door_cells:
        vec[72 + cell] = 1.0
    vec[108 + int(fs.has_key)] = 1.0
    if fs.distractors:
        vec[BASE_STATE_DIM:] = fs.distractors
    return vec


def values_to_factored(values: np.ndarray) -> FactoredState:
    values = np.asarray(values)
    agent = int(np.argmax(values[AGENT_BLOCK]))
    key = int(np.argmax(values[KEY_BLOCK]))
    doors = tuple(int(i) for i in np.flatnonzero(values[DOOR_BLOCK]))
    has_key = bool(values[109] == 1.0)
    distractors = tuple(int(v) for v in values[BASE_STATE_DIM:])
    return FactoredState(agent, key, doors, has_key, distractors)


def make_state(fs: FactoredState) -> StateVec:
    return StateVec(values=factored_to_values(fs), factored=fs)


def validate_state(s: StateVec) -> None:
    """Check the one-hot block invariants of a factored gridworld state."""
    v = s.values
    if not np.all(np.isfinite(v)):
        raise ValidationError("state values must be finite")
    if s.factored is None:
        return
    if v.shape[0] < BASE_STATE_DIM:
        raise ValidationError(f"state dim {v.shape[0]} < {BASE_STATE_DIM}")
    if not np.all((v == 0.0) | (v == 1.0)):
        raise ValidationError("discrete state values must be in {0, 1}")
    if v[AGENT_BLOCK].sum() != 1.0:
        raise ValidationError("agent block must sum to 1")
    if v[KEY_BLOCK].sum() != 1.0:
        raise ValidationError("key block must sum to 1")
    if v[HAS_KEY_BLOCK].sum() != 1.0:
        raise ValidationError("has_key block must sum to 1")
    if v[DOOR_BLOCK].sum() != len(s.factored.door_cells):
        raise ValidationError("door block must sum to the number of closed doors")
    if make_state(s.factored) != StateVec(v, s.factored):
        raise ValidationError("factored form does not round-trip to values")


GoalPredicate = Callable[[StateVec], bool]


def all_doors_open(s: StateVec) -> bool:
    """Goal predicate: no closed door remains in the state."""
    if s.factored is not None:
        return len(s.factored.door_cells) == 0
    return float(s.values[DOOR_BLOCK].sum()) == 0.0


@dataclass(frozen=True)
class Transition:
    s: StateVec
    a: int
    s_next: StateVec
    r: float
    done: bool
    episode_id: int
    t: int


@dataclass(frozen=True)
class ConfounderContext:
    """Per-episode confounder record.

    ``n_doors``/``placement``/``spurious_level``/``rho`` describe the
    environment context u_c; ``behavior`` tags the behavior-policy quality u_pi.
    """

    n_doors: int = 1
    placement: str = "train"  # "train" or "ood"
    spurious_level: int = 0
    rho: float = 0.9
    behavior: str = "expert"

    def __post_init__(self):
        if self.n_doors < 1:
            raise ValidationError("number of doors must be >= 1")
        if self.spurious_level < 0:
            raise ValidationError("spurious_level must be >= 0")


@dataclass
class OfflineDataset:
    transitions: list[Transition]
    contexts: list[ConfounderContext]  # one per episode
    behavior_level: str
    state_dim: int = BASE_STATE_DIM
    action_dim: int = ACTION_DIM
    horizon: int = 15
    n_by_sa: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.n_by_sa and self.transitions:
            self.n_by_sa = count_sa(self.transitions)

    @property
    def n_episodes(self) -> int:
        return len(self.contexts)

    def episodes(self) -> list[list[Transition]]:
        eps: dict[int, list[Transition]] = {}
        for tr in self.transitions:
            eps.setdefault(tr.episode_id, []).append(tr)
        return [eps[k] for k in sorted(eps)]

    def success_fraction(self, goal: GoalPredicate = all_doors_open) -> float:
        eps = self.episodes()
        if not eps:
            return 0.0
        return sum(relabel_success(ep, goal) for ep in eps) / len(eps)


def _tr_sa_key(tr: Transition) -> tuple:
    if tr.s.factored is not None:
        return tr.s.factored.sa_key(tr.a)
    return (tr.s.values.tobytes(), tr.a)


def count_sa(transitions: Iterable[Transition]) -> dict:
    counts: dict = {}
    for tr in transitions:
        k = _tr_sa_key(tr)
        counts[k] = counts.get(k, 0) + 1
    return counts


def count_sas(transitions: Iterable[Transition]) -> dict:
    """Visitation counts keyed by (s, a, s'); used for empirical transition targets."""
    counts: dict = {}
    for tr in transitions:
        if tr.s_next.factored is not None:
            k = _tr_sa_key(tr) + (tr.s_next.factored,)
        else:
            k = _tr_sa_key(tr) + (tr.s_next.values.tobytes(),)
        counts[k] = counts.get(k, 0) + 1
    return counts


def empirical_transition_targets(ds: OfflineDataset) -> np.ndarray:
    """Per-transition empirical conditional frequency n(s,a,s') / n(s,a)."""
    sa = ds.n_by_sa
    sas = count_sas(ds.transitions)
    out = np.empty(len(ds.transitions))
    for idx, tr in enumerate(ds.transitions):
        k = _tr_sa_key(tr)
        if tr.s_next.factored is not None:
            k2 = k + (tr.s_next.factored,)
        else:
            k2 = k + (tr.s_next.values.tobytes(),)
        out[idx] = sas[k2] / sa[k]
    return out


def relabel_success(episode: Sequence[Transition], goal: GoalPredicate = all_doors_open) -> bool:
    """True iff some transition of the episode reaches the goal within horizon."""
    if not episode:
        raise ValidationError("relabel_success requires a nonempty episode")
    return any(goal(tr.s_next) for tr in episode)


def validate_dataset(ds: OfflineDataset, goal: GoalPredicate = all_doors_open) -> None:
    """Verify all OfflineDataset invariants; raises ValidationError naming the failure."""
    seen_eps: list[int] = []
    last_t: dict[int, int] = {}
    for tr in ds.transitions:
        validate_state(tr.s)
        validate_state(tr.s_next)
        if not np.isfinite(tr.r):
            raise ValidationError("non-finite reward")
        if tr.t >= ds.horizon:
            raise ValidationError(f"step index t={tr.t} >= horizon {ds.horizon}")
        if tr.episode_id not in last_t:
            seen_eps.append(tr.episode_id)
        elif tr.t <= last_t[tr.episode_id]:
            raise ValidationError(
                f"t not strictly increasing within episode {tr.episode_id}")
        last_t[tr.episode_id] = tr.t
        if tr.s.factored is not None:
            goal_next = goal(tr.s_next)
            if (tr.r == 1.0) != goal_next:
                raise ValidationError(
                    "goal reward consistency: r=1 must hold iff s_next is a goal state")
    if seen_eps != list(range(len(seen_eps))):
        raise ValidationError("episode ids must be contiguous from 0")
    if len(seen_eps) > len(ds.contexts):
        raise ValidationError("missing ConfounderContext for some episode")
    recount = count_sa(ds.transitions)
    if recount != ds.n_by_sa:
        raise ValidationError("n_by_sa does not match a recount of transitions")


def _state_to_json(s: StateVec) -> dict:
    fs = s.factored
    if fs is None:
        return {"raw": [float(v) for v in s.values]}
    rec = {"agent": fs.agent_cell, "key": fs.key_cell,
           "doors": list(fs.door_cells), "has_key": fs.has_key}
    if fs.distractors:
        rec["x"] = list(fs.distractors)
    return rec


def _state_from_json(rec: dict) -> StateVec:
    if "raw" in rec:
        return StateVec(np.asarray(rec["raw"], dtype=np.float64), None)
    fs = FactoredState(
        agent_cell=int(rec["agent"]),
        key_cell=int(rec["key"]),
        door_cells=tuple(int(c) for c in rec["doors"]),
        has_key=bool(rec["has_key"]),
        distractors=tuple(int(v) for v in rec.get("x", ())),
    )
    return make_state(fs)


def save_dataset(ds: OfflineDataset, path) -> None:
    """Write the dataset as JSONL: one header line, then one line per transition."""
    for tr in ds.transitions:
        if not np.isfinite(tr.r):
            raise ValidationError("non-finite reward")
    base = ds.contexts[0] if ds.contexts else ConfounderContext(behavior=ds.behavior_level)
    header = {
        "schema": DATASET_SCHEMA,
        "state_dim": ds.state_dim,
        "action_dim": ds.action_dim,
        "horizon": ds.horizon,
        "behavior": ds.behavior_level,
        "context": {
            "doors": base.n_doors,
            "placement": base.placement,
            "spurious_level": base.spurious_level,
            "rho": base.rho,
        },
    }
    lines = [json.dumps(header, separators=(",", ":"))]
    for tr in ds.transitions:
        rec = {
            "ep": tr.episode_id,
            "t": tr.t,
            "s": _state_to_json(tr.s),
            "a": tr.a,
            "r": float(tr.r),
            "done": tr.done,
            "s_next": _state_to_json(tr.s_next),
        }
        lines.append(json.dumps(rec, separators=(",", ":")))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path) -> OfflineDataset:
    """Parse and validate a JSONL dataset file; n_by_sa is rebuilt from records."""
    with open(path, "r", encoding="utf-8") as fh:
        raw_lines = fh.read().split("\n")
    if raw_lines and raw_lines[-1] == "":
        raw_lines.pop()
    if not raw_lines:
        raise DatasetFormatError("empty file", line=1)
    try:
        header = json.loads(raw_lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"bad header: {exc}", line=1) from exc
    if header.get("schema") != DATASET_SCHEMA:
        raise DatasetFormatError(f"unknown schema {header.get('schema')!r}", line=1)
    ctx = header.get("context", {})
    base = ConfounderContext(
        n_doors=int(ctx.get("doors", 1)),
        placement=str(ctx.get("placement", "train")),
        spurious_level=int(ctx.get("spurious_level", 0)),
        rho=float(ctx.get("rho", 0.9)),
        behavior=str(header.get("behavior", "expert")),
    )
    transitions: list[Transition] = []
    contexts: list[ConfounderContext] = []
    for lineno, line in enumerate(raw_lines[1:], start=2):
        try:
            rec = json.loads(line)
            tr = Transition(
                s=_state_from_json(rec["s"]),
                a=int(rec["a"]),
                s_next=_state_from_json(rec["s_next"]),
                r=float(rec["r"]),
                done=bool(rec["done"]),
                episode_id=int(rec["ep"]),
                t=int(rec["t"]),
            )
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DatasetFormatError(str(exc), line=lineno) from exc
        if tr.a >= header["action_dim"] or tr.a < 0:
            raise ValidationError(f"action id {tr.a} out of range")
        if tr.t == 0:
            n_doors = (len(tr.s.factored.door_cells)
                       if tr.s.factored is not None else base.n_doors)
            contexts.append(replace(base, n_doors=max(n_doors, 1)))
        transitions.append(tr)
    ds = OfflineDataset(
        transitions=transitions,
        contexts=contexts,
        behavior_level=header["behavior"],
        state_dim=int(header["state_dim"]),
        action_dim=int(header["action_dim"]),
        horizon=int(header["horizon"]),
    )
    validate_dataset(ds)
    return ds
