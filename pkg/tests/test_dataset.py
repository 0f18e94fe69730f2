import itertools

import numpy as np
import pytest

from leuq.data import (
    SolverConfig,
    TrajectorySet,
    generate_dataset,
    load_dataset,
    make_bundled_windows,
    read_header,
    save_dataset,
    stack_windows,
    window_count,
)
from leuq.data.dataset import SolverFailure
from leuq.errors import ChecksumError, ConfigError, FormatError, VersionError


def enumerate_windows(t_snap, history, horizon, bundle):
    """Brute-force enumeration of feasible window starts."""
    return [s for s in range(t_snap) if s + history + horizon * bundle <= t_snap]


FEASIBLE = [c for c in itertools.product([1, 3, 7], [1, 2, 5], [1, 2, 3]) if c[0] + c[1] * c[2] <= 20]


def tagged_set(n_traj=3, t_snap=20, n=4):
    states = np.stack([np.full((t_snap, n, n), 10.0 * (k + 1)) + np.arange(t_snap)[:, None, None]
                       for k in range(n_traj)])
    return TrajectorySet(states, SolverConfig(n=n))


class TestGeneration:
    def test_shapes(self, small_dataset):
        train, test = small_dataset
        assert train.states.shape == (6, 12, 16, 16)
        assert test.states.shape == (2, 12, 16, 16)
        assert (train.split, test.split) == ("train", "test")

    def test_desk_scale_shapes(self):
        train, test = generate_dataset(SolverConfig(n=32, dt=5e-3, seed=7), 8, 2)
        assert train.states.shape == (8, 20, 32, 32)
        assert test.states.shape == (2, 20, 32, 32)

    def test_deterministic(self, small_dataset):
        cfg = small_dataset[0].config
        again, _ = generate_dataset(cfg, 6, 2)
        assert again.states.tobytes() == small_dataset[0].states.tobytes()

    def test_worker_count_does_not_change_output(self):
        cfg = SolverConfig(n=8, dt=0.02, snapshot_interval=0.1, n_snapshots=2, seed=5)
        one, _ = generate_dataset(cfg, 17, 1, workers=1)
        two, _ = generate_dataset(cfg, 17, 1, workers=2)
        assert one.states.tobytes() == two.states.tobytes()

    def test_trajectories_differ(self, small_dataset):
        s = small_dataset[0].states
        assert not np.array_equal(s[0], s[1])

    def test_requires_both_splits(self):
        with pytest.raises(ConfigError):
            generate_dataset(SolverConfig(n=8), 0, 1)

    def test_solver_failure_names_trajectory(self):
        cfg = SolverConfig(n=16, dt=0.5, snapshot_interval=0.5, n_snapshots=1, ic_rms=50.0)
        with pytest.raises(SolverFailure) as info:
            generate_dataset(cfg, 2, 1)
        assert info.value.index == 0

    def test_non_finite_states_rejected(self):
        with pytest.raises(ConfigError):
            TrajectorySet(np.full((1, 2, 4, 4), np.nan), SolverConfig(n=4))


class TestPersistence:
    def test_round_trip(self, tmp_path, small_dataset):
        ts = small_dataset[1]
        path = tmp_path / "test.lds"
        save_dataset(ts, path)
        back = load_dataset(path)
        assert back.states.tobytes() == ts.states.tobytes()
        assert back.config == ts.config
        assert back.split == "test"
        header = read_header(path)
        assert header["shape"] == list(ts.states.shape)

    def test_corrupt_byte(self, tmp_path, small_dataset):
        path = tmp_path / "d.lds"
        save_dataset(small_dataset[1], path)
        raw = bytearray(path.read_bytes())
        raw[-100] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(ChecksumError):
            load_dataset(path)

    def test_unknown_version(self, tmp_path, small_dataset):
        path = tmp_path / "d.lds"
        save_dataset(small_dataset[1], path)
        path.write_bytes(path.read_bytes().replace(b'"format_version": 1', b'"format_version": 7', 1))
        with pytest.raises(VersionError):
            load_dataset(path)

    def test_truncated(self, tmp_path, small_dataset):
        path = tmp_path / "d.lds"
        save_dataset(small_dataset[1], path)
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(FormatError):
            load_dataset(path)

    def test_not_a_dataset(self, tmp_path):
        path = tmp_path / "x.lds"
        path.write_bytes(b"hello world, not a dataset")
        with pytest.raises(FormatError):
            load_dataset(path)


class TestWindows:
    @pytest.mark.parametrize("t_snap, history, horizon, bundle, expected", [
        (20, 10, 10, 1, 1),
        (20, 10, 1, 1, 10),
        (20, 2, 3, 2, 13),
    ])
    def test_counts(self, t_snap, history, horizon, bundle, expected):
        assert window_count(t_snap, history, horizon, bundle) == expected
        wins = make_bundled_windows(tagged_set(2, t_snap), history, horizon, bundle)
        assert len(wins) == 2 * expected
        assert wins[0].targets.shape[0] == horizon * bundle

    @pytest.mark.parametrize("history, horizon, bundle", FEASIBLE)
    def test_count_formula_matches_enumeration(self, history, horizon, bundle):
        t_snap = 20
        assert window_count(t_snap, history, horizon, bundle) == len(enumerate_windows(t_snap, history, horizon, bundle))

    def test_windows_never_cross_trajectories(self):
        ts = tagged_set(4)
        for w in make_bundled_windows(ts, 5, 3, 2):
            offset = w.frames[:, 0, 0] - np.arange(w.start, w.start + w.frames.shape[0])
            np.testing.assert_array_equal(offset, 10.0 * (w.trajectory + 1))

    def test_windows_are_contiguous(self):
        ts = tagged_set(1)
        for w in make_bundled_windows(ts, 4, 2, 3):
            steps = np.diff(w.frames[:, 0, 0])
            assert (steps == 1.0).all()
            assert w.horizon == 2

    def test_infeasible_states_inequality(self):
        with pytest.raises(ConfigError, match=r"10 \+ 6\*2 > T_snap = 20"):
            make_bundled_windows(tagged_set(1), 10, 6, 2)

    def test_stack(self):
        wins = make_bundled_windows(tagged_set(2), 3, 2)
        x, y = stack_windows(wins)
        assert x.shape == (len(wins), 3, 4, 4)
        assert y.shape == (len(wins), 2, 4, 4)
