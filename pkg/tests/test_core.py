import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from because.core import (
    BASE_STATE_DIM,
    ConfounderContext,
    DatasetFormatError,
    FactoredState,
    OfflineDataset,
    StateVec,
    Transition,
    ValidationError,
    all_doors_open,
    count_sa,
    empirical_transition_targets,
    factored_to_values,
    load_dataset,
    make_state,
    relabel_success,
    save_dataset,
    validate_dataset,
    validate_state,
    values_to_factored,
)
from because.unlock import BehaviorPolicy, GridConfig, collect


def fs(agent=0, key=1, doors=(2,), has_key=False, x=()):
    return FactoredState(agent, key, tuple(doors), has_key, tuple(x))


def test_factored_roundtrip_simple():
    f = fs(agent=7, key=35, doors=(0, 17), has_key=True)
    v = factored_to_values(f)
    assert v.shape == (BASE_STATE_DIM,)
    assert v.sum() == 5.0  # agent + key + 2 doors + has_key flag
    assert values_to_factored(v) == f


def test_state_vector_layout():
    f = fs(agent=3, key=10, doors=(20,), has_key=False, x=(1, 0))
    v = factored_to_values(f)
    assert v[3] == 1.0 and v[36 + 10] == 1.0 and v[72 + 20] == 1.0
    assert v[108] == 1.0 and v[109] == 0.0
    assert list(v[110:]) == [1.0, 0.0]
    validate_state(make_state(f))


def test_validate_state_rejects_bad_blocks():
    v = factored_to_values(fs())
    v[0] = 0.0  # agent block now sums to 0
    with pytest.raises(ValidationError):
        validate_state(StateVec(v, fs()))


def test_goal_predicate_is_empty_door_block():
    assert not all_doors_open(make_state(fs(doors=(5,))))
    assert all_doors_open(make_state(fs(doors=())))


@st.composite
def factored_states(draw, n_doors=st.integers(0, 3)):
    k = draw(n_doors)
    cells = draw(st.lists(st.integers(0, 35), min_size=2 + k, max_size=2 + k,
                          unique=True))
    return FactoredState(cells[0], cells[1], tuple(sorted(cells[2:])),
                         draw(st.booleans()), tuple(draw(st.lists(st.integers(0, 1), max_size=3))))


@given(factored_states())
def test_factored_roundtrip_property(f):
    assert values_to_factored(factored_to_values(f)) == f


def _tiny_dataset(n_episodes=2, steps=3):
    transitions, contexts = [], []
    for ep in range(n_episodes):
        doors = (10 + ep,)
        for t in range(steps):
            s = make_state(fs(agent=t, key=6, doors=doors))
            s2 = make_state(fs(agent=t + 1, key=6, doors=doors))
            transitions.append(Transition(s, 3, s2, 0.0, t == steps - 1, ep, t))
        contexts.append(ConfounderContext())
    return OfflineDataset(transitions, contexts, "expert", horizon=15)


def test_save_load_roundtrip(tmp_path):
    ds = _tiny_dataset()
    path = tmp_path / "d.jsonl"
    save_dataset(ds, path)
    back = load_dataset(path)
    assert back.transitions == ds.transitions
    assert back.behavior_level == ds.behavior_level
    assert back.n_by_sa == ds.n_by_sa


def test_save_empty_dataset(tmp_path):
    ds = OfflineDataset([], [], "expert")
    path = tmp_path / "empty.jsonl"
    save_dataset(ds, path)
    assert path.read_text().count("\n") == 1  # header only
    assert load_dataset(path).transitions == []


def test_three_step_episode_lines(tmp_path):
    ds = _tiny_dataset(n_episodes=1, steps=3)
    path = tmp_path / "d.jsonl"
    save_dataset(ds, path)
    lines = path.read_text().strip().split("\n")
    assert len(lines) == 4
    import json
    recs = [json.loads(l) for l in lines[1:]]
    assert [r["ep"] for r in recs] == [0, 0, 0]
    assert [r["t"] for r in recs] == [0, 1, 2]


def test_roundtrip_reserialization_bit_identical(tmp_path):
    cfg = GridConfig()
    ds = collect(cfg, BehaviorPolicy("expert"), 200, seed=5)
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    save_dataset(ds, p1)
    save_dataset(load_dataset(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_load_rejects_decreasing_t(tmp_path):
    ds = _tiny_dataset(n_episodes=1, steps=3)
    path = tmp_path / "d.jsonl"
    save_dataset(ds, path)
    lines = path.read_text().strip().split("\n")
    lines[2], lines[3] = lines[3], lines[2]  # t goes 0, 2, 1
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValidationError, match="strictly increasing"):
        load_dataset(path)


def test_load_truncated_line_reports_line_number(tmp_path):
    ds = _tiny_dataset(n_episodes=1, steps=3)
    path = tmp_path / "d.jsonl"
    save_dataset(ds, path)
    txt = path.read_text().rstrip("\n")
    path.write_text(txt[:-9] + "\n")  # chop the final record
    with pytest.raises(DatasetFormatError) as err:
        load_dataset(path)
    assert err.value.line == 4


def test_save_rejects_nonfinite_reward(tmp_path):
    ds = _tiny_dataset(n_episodes=1, steps=1)
    bad = Transition(ds.transitions[0].s, 0, ds.transitions[0].s_next,
                     float("nan"), False, 0, 0)
    ds2 = OfflineDataset([bad], [ConfounderContext()], "expert")
    with pytest.raises(ValidationError):
        save_dataset(ds2, tmp_path / "x.jsonl")


def test_relabel_success():
    doors = (4,)
    s0 = make_state(fs(agent=3, key=6, doors=doors))
    s_goal = make_state(fs(agent=4, key=6, doors=()))
    ep_win = [Transition(s0, 5, s_goal, 1.0, True, 0, 0)]
    ep_lose = [Transition(s0, 0, s0, 0.0, True, 0, 0)]
    assert relabel_success(ep_win)
    assert not relabel_success(ep_lose)
    with pytest.raises(ValidationError):
        relabel_success([])


def test_n_by_sa_recount_matches():
    ds = collect(GridConfig(), BehaviorPolicy("medium"), 20, seed=0)
    assert count_sa(ds.transitions) == ds.n_by_sa
    validate_dataset(ds)


def test_goal_reward_consistency_enforced():
    ds = _tiny_dataset(n_episodes=1, steps=1)
    tr = ds.transitions[0]
    bad = Transition(tr.s, tr.a, tr.s_next, 1.0, tr.done, 0, 0)  # r=1, not a goal
    with pytest.raises(ValidationError, match="goal reward"):
        validate_dataset(OfflineDataset([bad], [ConfounderContext()], "expert"))


def test_empirical_targets_are_conditional_frequencies():
    ds = collect(GridConfig(), BehaviorPolicy("expert"), 50, seed=3)
    t = empirical_transition_targets(ds)
    assert np.all(t > 0) and np.all(t <= 1.0)
    # deterministic dynamics: every observed (s,a) maps to a single s'
    assert np.allclose(t, 1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_collect_roundtrip_property(seed):
    ds = collect(GridConfig(), BehaviorPolicy("random"), 2, seed=seed)
    import io, tempfile, os
    fd, path = tempfile.mkstemp()
    os.close(fd)
    try:
        save_dataset(ds, path)
        assert load_dataset(path).transitions == ds.transitions
    finally:
        os.unlink(path)
