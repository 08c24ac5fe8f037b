import json

import numpy as np
import pytest
from PIL import Image
from scipy import stats

from crillab import corpus, taskforge
from crillab.corpus import PSEUDO, REAL, Trajectory
from crillab.errors import (
    ActionRangeError,
    ContractViolation,
    InvalidArgument,
    LayoutError,
    MissingMetadataError,
    ShapeMismatchError,
)


@pytest.fixture(scope="module")
def suite():
    return taskforge.make_suite(2, 0)


@pytest.fixture(scope="module")
def demos(suite):
    return corpus.collect_demos(suite[0], 10, 0)


def fake_pseudo(frames_like, n, length=3, seed=0):
    rng = np.random.default_rng(seed)
    shape = frames_like.shape[1:]
    return [
        Trajectory(rng.uniform(-1, 1, size=(length + 1,) + shape).astype(np.float32),
                   rng.integers(0, 5, size=length), provenance=PSEUDO)
        for _ in range(n)
    ]


def test_trajectory_invariants():
    f = np.zeros((3, 8, 8, 3), np.float32)
    Trajectory(f, [0, 4], task_tag=1)
    with pytest.raises(InvalidArgument):
        Trajectory(f, [0], task_tag=1)
    with pytest.raises(InvalidArgument):
        Trajectory(f, [0, 4])  # real without a tag
    Trajectory(f, [0, 4], provenance=PSEUDO)


def test_trajectory_is_immutable(demos):
    with pytest.raises(ValueError):
        demos.trajectories[0].frames[0, 0, 0, 0] = 0.5


def test_collect_single(suite):
    d = corpus.collect_demos(suite[0], 1, 0)
    assert len(d) == 1 and d.trajectories[0].provenance == REAL


def test_collect_deterministic(suite, demos):
    again = corpus.collect_demos(suite[0], 10, 0)
    assert all(a == b for a, b in zip(demos.trajectories, again.trajectories))


def test_demos_end_with_stop(suite, demos):
    for tr in demos.trajectories:
        assert tr.actions[-1] == suite[0].stop and not tr.truncated


def test_collect_rejects_zero(suite):
    with pytest.raises(InvalidArgument):
        corpus.collect_demos(suite[0], 0, 0)


def test_collection_seeds_are_disjoint():
    assert not set(corpus.episode_seeds(1, 100)) & set(corpus.episode_seeds(2, 100))


@pytest.mark.parametrize("t", [1, 2, 3, 4, 5])
@pytest.mark.parametrize("m", [1, 7])
def test_buffer_composition(suite, t, m):
    d = corpus.collect_demos(suite[0], m, 3)
    pseudo = fake_pseudo(d.trajectories[0].frames, (t - 1) * m)
    buf = corpus.buffer_prepare(d, pseudo, t=t)
    rep = buf.composition_report()
    assert rep["entries"] == {"real": m, "pseudo": (t - 1) * m, "rehearsed": 0}
    assert rep["t"] == t


def test_buffer_t3_m10(demos):
    buf = corpus.buffer_prepare(demos, fake_pseudo(demos.trajectories[0].frames, 20), t=3)
    assert buf.composition_report()["entries"]["real"] == 10
    assert buf.composition_report()["entries"]["pseudo"] == 20


def test_buffer_rejects_mislabelled_pseudo(demos):
    with pytest.raises(InvalidArgument):
        corpus.buffer_prepare(demos, list(demos.trajectories))


def test_buffer_rejects_missing_demos():
    with pytest.raises(InvalidArgument):
        corpus.buffer_prepare(None, [])


def test_buffer_teardown(demos):
    buf = corpus.buffer_prepare(demos, [], t=1)
    buf.delete()
    assert buf.deleted
    with pytest.raises(ContractViolation):
        buf.entries
    with pytest.raises(ContractViolation):
        corpus.sample_pairs(buf, 4, 0)


def test_sample_single_pair():
    f = np.linspace(-1, 1, 2 * 4 * 4 * 3, dtype=np.float32).reshape(2, 4, 4, 3)
    d = corpus.DemoSet((Trajectory(f, [4], task_tag=1),), taskforge.make_suite(1, 0)[0], 0)
    frames, actions = corpus.sample_pairs(corpus.buffer_prepare(d), 4, 0)
    assert frames.shape == (4, 4, 4, 3)
    assert all(np.array_equal(x, f[0]) for x in frames)
    assert list(actions) == [4] * 4


def test_sample_deterministic(demos):
    buf = corpus.buffer_prepare(demos)
    a = corpus.sample_pairs(buf, 16, 5)
    b = corpus.sample_pairs(buf, 16, 5)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_sample_rejects_bad_batch(demos):
    with pytest.raises(InvalidArgument):
        corpus.sample_pairs(corpus.buffer_prepare(demos), 0, 0)


def test_real_pseudo_fraction_binomial(demos):
    pseudo = fake_pseudo(demos.trajectories[0].frames, 10, length=7)
    buf = corpus.buffer_prepare(demos, pseudo, t=2)
    n_real = sum(len(t) for t in demos.trajectories)
    n_pseudo = 10 * 7
    p = n_real / (n_real + n_pseudo)
    n = 10_000
    pool = buf.pair_pool()
    idx = pool.draw(np.random.default_rng(11), n)
    is_real = np.array([pool.entries[pool.traj_idx[i]].provenance == REAL for i in idx])
    sigma = np.sqrt(n * p * (1 - p))
    assert abs(is_real.sum() - n * p) <= 3 * sigma
    assert buf.composition_report()["pair_fraction"]["real"] == pytest.approx(p)


def test_pair_sampling_uniform_chi2(demos):
    buf = corpus.buffer_prepare(demos)
    pool = buf.pair_pool()
    idx = pool.draw(np.random.default_rng(2), 100_000)
    counts = np.bincount(idx, minlength=len(pool))
    assert stats.chisquare(counts).pvalue > 0.01


def test_length_corrected_weights(demos):
    pseudo = fake_pseudo(demos.trajectories[0].frames, 10, length=2)
    buf = corpus.buffer_prepare(demos, pseudo, t=2)
    pool = buf.pair_pool()
    idx = pool.draw(np.random.default_rng(0), 40_000, length_corrected=True)
    real = np.mean([pool.entries[pool.traj_idx[i]].provenance == REAL for i in idx])
    assert abs(real - 0.5) < 0.02


def test_dataset_round_trip(tmp_path, demos):
    path = corpus.save_dataset(demos, tmp_path)
    assert path == tmp_path / "task_1"
    back = corpus.load_dataset(path)
    assert back.task == demos.task and back.collection_seed == demos.collection_seed
    assert all(a == b for a, b in zip(demos.trajectories, back.trajectories))


def test_dataset_layout(tmp_path, demos):
    path = corpus.save_dataset(demos, tmp_path)
    meta = json.loads((path / "meta.json").read_text())
    assert meta["n_trajectories"] == 10 and meta["format_version"] == corpus.DATASET_FORMAT_VERSION
    tr = demos.trajectories[0]
    assert (path / "traj_0" / f"frame_{len(tr)}.png").is_file()
    lines = (path / "traj_0" / "actions.csv").read_text().split()
    assert [int(x) for x in lines] == list(tr.actions)


def test_save_is_byte_stable(tmp_path, demos):
    a = corpus.save_dataset(demos, tmp_path / "a")
    b = corpus.save_dataset(demos, tmp_path / "b")
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_load_empty_dir(tmp_path):
    with pytest.raises(MissingMetadataError):
        corpus.load_dataset(tmp_path)


def test_load_wrong_frame_shape(tmp_path, demos):
    path = corpus.save_dataset(demos, tmp_path)
    Image.fromarray(np.zeros((16, 16, 3), np.uint8)).save(path / "traj_3" / "frame_0.png")
    with pytest.raises(ShapeMismatchError, match="traj_3"):
        corpus.load_dataset(path)


def test_load_action_out_of_range(tmp_path, demos):
    path = corpus.save_dataset(demos, tmp_path)
    (path / "traj_1" / "actions.csv").write_text("0\n9\n" + "0\n" * (len(demos.trajectories[1]) - 2))
    with pytest.raises(ActionRangeError, match="traj_1"):
        corpus.load_dataset(path)


def test_load_missing_trajectory_dir(tmp_path, demos):
    path = corpus.save_dataset(demos, tmp_path)
    for f in (path / "traj_2").iterdir():
        f.unlink()
    (path / "traj_2").rmdir()
    with pytest.raises(LayoutError):
        corpus.load_dataset(path)


def test_pseudo_dump_round_trip(tmp_path, demos):
    pseudo = fake_pseudo(demos.trajectories[0].frames, 3)
    quantised = [Trajectory(taskforge.normalize(taskforge.denormalize(t.frames)), t.actions,
                            provenance=PSEUDO) for t in pseudo]
    corpus.save_trajectories(quantised, tmp_path / "p", {"kind": "pseudo", "image_size": 32})
    back, meta = corpus.load_trajectories(tmp_path / "p", n_actions=5)
    assert meta["provenance"] == [PSEUDO] * 3
    assert all(a == b for a, b in zip(quantised, back))


def test_frame_hash_distinguishes(demos):
    tr = demos.trajectories[0]
    assert corpus.frame_hash(tr.frames[0]) == corpus.frame_hash(tr.frames[0].copy())
    assert corpus.frame_hash(tr.frames[0]) != corpus.frame_hash(tr.frames[1])
