import itertools

import numpy as np
import pytest

from crillab import taskforge as tf
from crillab.errors import ContractViolation, InvalidArgument
from crillab.taskforge import EnvState, Region


@pytest.fixture(scope="module")
def suite():
    return tf.make_suite(4, 0)


@pytest.fixture(scope="module")
def reach(suite):
    return suite[0]


@pytest.fixture(scope="module")
def push(suite):
    return suite[1]


def test_smallest_suite():
    (task,) = tf.make_suite(1, 0)
    assert task.task_id == 1


def test_suite_is_deterministic():
    assert tf.make_suite(5, 7) == tf.make_suite(5, 7)
    assert tf.make_suite(5, 7) != tf.make_suite(5, 8)


def test_suite_rejects_zero_tasks():
    with pytest.raises(InvalidArgument):
        tf.make_suite(0, 0)


def test_palettes_pairwise_distinguishable():
    threshold = 40
    suite = tf.make_suite(4, 0, min_palette_distance=threshold)
    pairs = list(itertools.combinations(suite, 2))
    assert len(pairs) == 6
    for a, b in pairs:
        # independent recomputation: per role, largest channel gap
        gaps = [
            max(abs(x - y) for x, y in zip(getattr(a.palette, role), getattr(b.palette, role)))
            for role in ("background", "agent", "object", "goal")
        ]
        assert min(gaps) > threshold


def test_goal_kinds_alternate(suite):
    assert [t.goal_kind for t in suite] == ["reach", "push", "reach", "push"]


def test_taskspec_invariants(suite):
    for t in suite:
        assert t.grid_size >= 6 and t.image_size % t.grid_size == 0
        assert not t.goal_region.overlaps(t.object_home_region)
        for r in (t.agent_region, t.object_home_region, t.goal_region):
            assert r.inside(t.grid_size)


@pytest.mark.parametrize("bad", [
    dict(grid_size=5, image_size=20),
    dict(image_size=30),
    dict(goal_region=Region(3, 3, 4, 4)),
])
def test_taskspec_validation(reach, bad):
    kw = {**tf.task_to_dict(reach)}
    kw = tf.task_from_dict(kw).__dict__ | bad
    with pytest.raises(InvalidArgument):
        tf.TaskSpec(**kw)


def test_reset_deterministic(reach):
    assert tf.reset(reach, 12) == tf.reset(reach, 12)


def test_reset_respects_regions(suite):
    for task in suite:
        for seed in range(1000):
            s = tf.reset(task, seed)
            assert task.object_home_region.contains(s.object_cell)
            assert task.agent_region.contains(s.agent_cell)
            assert task.goal_region.contains(s.goal_cell)
            assert s.step_count == 0 and not s.done


def test_reset_point_region(reach):
    task = tf.TaskSpec(**(reach.__dict__ | {"object_home_region": Region(4, 5, 4, 5)}))
    assert {tf.reset(task, s).object_cell for s in range(50)} == {(4, 5)}


def _state(agent, obj=(4, 4), goal=(0, 0)):
    return EnvState(agent, obj, goal)


def test_step_moves_agent(reach):
    assert tf.step(reach, _state((3, 4)), tf.PLUS_COL).agent_cell == (3, 5)
    assert tf.step(reach, _state((3, 4)), tf.MINUS_ROW).agent_cell == (2, 4)


def test_step_clamps_at_border(reach):
    g = reach.grid_size - 1
    assert tf.step(reach, _state((3, g)), tf.PLUS_COL).agent_cell == (3, g)
    assert tf.step(reach, _state((0, 2)), tf.MINUS_ROW).agent_cell == (0, 2)


def test_push_rule(push):
    s = tf.step(push, EnvState((2, 2), (2, 3), (0, 7)), tf.PLUS_COL)
    assert s.agent_cell == (2, 3) and s.object_cell == (2, 4)


def test_push_blocked_at_border(push):
    g = push.grid_size - 1
    s = tf.step(push, EnvState((2, g - 1), (2, g), (0, 0)), tf.PLUS_COL)
    assert s.agent_cell == (2, g - 1) and s.object_cell == (2, g)


def test_reach_walks_over_object(reach):
    s = tf.step(reach, EnvState((2, 2), (2, 3), (0, 0)), tf.PLUS_COL)
    assert s.agent_cell == (2, 3) and s.object_cell == (2, 3)


def test_stop_terminates(reach):
    s = tf.step(reach, _state((0, 0)), reach.stop)
    assert s.done and s.succeeded and s.step_count == 1
    with pytest.raises(ContractViolation):
        tf.step(reach, s, tf.PLUS_ROW)


def test_step_cap_terminates(reach):
    s = _state((5, 5))
    for _ in range(reach.max_steps):
        s = tf.step(reach, s, tf.PLUS_ROW)
    assert s.done and not s.succeeded and s.step_count == reach.max_steps


def test_step_rejects_unknown_action(reach):
    with pytest.raises(InvalidArgument):
        tf.step(reach, _state((1, 1)), 5)


def test_step_is_deterministic_and_closed(suite):
    rng = np.random.default_rng(0)
    for task in suite:
        for seed in range(30):
            s = tf.reset(task, seed)
            while not s.done:
                a = int(rng.integers(task.n_actions))
                nxt = tf.step(task, s, a)
                assert nxt == tf.step(task, s, a)
                for cell in (nxt.agent_cell, nxt.object_cell):
                    assert all(0 <= v < task.grid_size for v in cell)
                assert nxt.step_count <= task.max_steps
                assert not nxt.succeeded or nxt.done
                s = nxt


def test_is_success(reach, push):
    assert tf.is_success(reach, EnvState((1, 1), (4, 4), (1, 1)))
    assert not tf.is_success(push, EnvState((1, 1), (4, 4), (1, 1)))
    assert tf.is_success(push, EnvState((2, 1), (1, 1), (1, 1)))


def test_expert_greedy_rule(reach):
    assert tf.expert_action(reach, EnvState((0, 0), (4, 4), (0, 3))) == tf.PLUS_COL
    assert tf.expert_action(reach, EnvState((3, 0), (4, 4), (0, 3))) == tf.MINUS_ROW  # rows first
    assert tf.expert_action(reach, EnvState((0, 3), (4, 4), (0, 3))) == reach.stop


def test_expert_pushes_from_behind(push):
    # object left of the goal column on the goal row: push +col from its left side
    assert tf.expert_action(push, EnvState((0, 3), (0, 4), (0, 7))) == tf.PLUS_COL
    # agent on the wrong side walks around the object instead of pushing it away
    a = tf.expert_action(push, EnvState((0, 5), (0, 4), (0, 7)))
    assert a == tf.PLUS_ROW


def test_expert_stop_iff_success(suite):
    for task in suite:
        for seed in range(50):
            states, actions = tf.expert_rollout(task, seed)
            for s, a in zip(states, actions):
                assert (a == task.stop) == tf.is_success(task, s)


def test_expert_always_succeeds(suite):
    for task in suite:
        for seed in range(1000):
            states, actions = tf.expert_rollout(task, seed)
            assert states[-1].succeeded
            assert len(actions) <= task.max_steps
            if task.goal_kind == "reach":
                assert len(actions) <= 2 * task.grid_size + 2


def test_expert_terminal_success_first_hundred(suite):
    for task in suite:
        assert all(tf.expert_rollout(task, s)[0][-1].succeeded for s in range(100))


def test_render_range_and_determinism(reach):
    s = tf.reset(reach, 3)
    a, b = tf.render(reach, s), tf.render(reach, s)
    assert a.shape == (32, 32, 3) and a.dtype == np.float32
    np.testing.assert_array_equal(a, b)
    assert a.min() >= -1 and a.max() <= 1


def test_render_diff_confined_to_agent_cells(reach):
    s1 = EnvState((6, 6), (3, 3), (0, 0))
    s2 = EnvState((6, 5), (3, 3), (0, 0))
    d = np.any(tf.render(reach, s1) != tf.render(reach, s2), axis=2)
    px = reach.cell_px
    blocks = {(r // px, c // px) for r, c in zip(*np.nonzero(d))}
    assert blocks == {(6, 6), (6, 5)}


def _all_states(task):
    cells = list(itertools.product(range(task.grid_size), repeat=2))
    for agent, obj, goal in itertools.product(cells, repeat=3):
        yield EnvState(agent, obj, goal)


def test_render_injective_small_grid(reach):
    task = tf.TaskSpec(**(reach.__dict__ | {"grid_size": 6, "image_size": 18,
                                            "agent_region": Region(4, 4, 5, 5),
                                            "object_home_region": Region(2, 2, 3, 3),
                                            "goal_region": Region(0, 0, 1, 1)}))
    seen = {}
    for s in _all_states(task):
        key = tf.render_uint8(task, s).tobytes()
        assert seen.setdefault(key, s.positions()) == s.positions()
    assert len(seen) == 36 ** 3


def test_decode_inverts_render(suite):
    for task in suite:
        for seed in range(20):
            for s in tf.expert_rollout(task, seed)[0]:
                assert tf.decode_frame(task, tf.render(task, s)).positions() == s.positions()


def test_three_axis_variant():
    suite = tf.make_suite(2, 1, dims=3)
    for task in suite:
        assert task.n_actions == 7 and task.stop == 6
        for seed in range(200):
            states, actions = tf.expert_rollout(task, seed)
            assert states[-1].succeeded
            for s in states:
                assert tf.decode_frame(task, tf.render(task, s)).positions() == s.positions()


def test_suite_yaml_round_trip(tmp_path, suite):
    path = tmp_path / "suite.yaml"
    tf.save_suite(suite, path)
    assert tf.load_suite(path) == suite
    first = path.read_bytes()
    tf.save_suite(suite, path)
    assert path.read_bytes() == first


def test_goal_visible_under_object(push):
    s = EnvState((0, 0), (3, 3), (3, 3))
    img = tf.render_uint8(push, s)
    px = push.cell_px
    cell = img[3 * px:4 * px, 3 * px:4 * px].reshape(-1, 3)
    colors = {tuple(int(v) for v in c) for c in cell}
    assert tuple(push.palette.goal) in colors and tuple(push.palette.object) in colors


def test_decode_agent_object_goal_same_cell(reach):
    s = EnvState((2, 2), (2, 2), (2, 2))
    assert tf.decode_frame(reach, tf.render(reach, s)).positions() == s.positions()


@pytest.mark.parametrize("extent", [1, 2])
def test_goal_extent(extent):
    for task in tf.make_suite(4, 0, goal_extent=extent):
        g = task.goal_region
        assert g.row1 - g.row0 + 1 == extent and g.col1 - g.col0 + 1 == extent
    with pytest.raises(InvalidArgument):
        tf.make_suite(2, 0, goal_extent=3)
