import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from leuq.autodiff import Adam, AdamState, Tensor, adam_step, cosine_lr, load_params, save_params
from leuq.errors import ChecksumError, DimensionError, FormatError, NumericError, VersionError


def adam_scalar(grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8, theta=0.0):
    """Plain-Python Adam recurrence for a single scalar parameter."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return theta


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        state = AdamState()
        p = np.array([1.0, -2.0])
        out = adam_step([p], [np.zeros(2)], state)
        np.testing.assert_array_equal(out[0], p)
        assert state.step == 1

    def test_none_gradient_counts_as_zero(self):
        state = AdamState()
        out = adam_step([np.ones(3)], [None], state)
        np.testing.assert_array_equal(out[0], np.ones(3))

    @pytest.mark.parametrize("c", [1e-3, 1.0, 250.0])
    def test_first_step_moves_by_lr(self, c):
        out = adam_step([np.zeros(1)], [np.array([c])], AdamState())
        assert out[0][0] == pytest.approx(-1e-3, abs=1e-6)

    def test_two_step_closed_form(self):
        state = AdamState()
        p = [np.array([0.5])]
        for _ in range(2):
            p = adam_step(p, [np.array([0.3])], state)
        assert p[0][0] == pytest.approx(adam_scalar([0.3, 0.3], theta=0.5), abs=1e-15)

    @settings(max_examples=50)
    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=8))
    def test_matches_scalar_recurrence(self, grads):
        state = AdamState(lr=0.01)
        p = [np.array([0.0])]
        for g in grads:
            p = adam_step(p, [np.array([g])], state)
        assert p[0][0] == pytest.approx(adam_scalar(grads, lr=0.01), abs=1e-12)

    def test_moments_congruent_with_params(self):
        state = AdamState()
        adam_step([np.zeros((2, 3)), np.zeros(4)], [np.ones((2, 3)), np.ones(4)], state)
        assert [m.shape for m in state.m] == [(2, 3), (4,)]
        assert [v.shape for v in state.v] == [(2, 3), (4,)]

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            adam_step([np.zeros(3)], [np.zeros(2)], AdamState())

    def test_overflowing_moment_is_numeric_error(self):
        with pytest.raises(NumericError, match="parameter 0"):
            adam_step([np.zeros(1)], [np.array([1e200])], AdamState())

    def test_tensor_optimizer_updates_in_place(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        opt = Adam([x], lr=0.1)
        for _ in range(200):
            opt.zero_grad()
            (x * x).sum().backward()
            opt.step()
        assert abs(x.data[0]) < 0.05


class TestCosineSchedule:
    def test_endpoints(self):
        assert cosine_lr(0, 100, 1e-3, 1e-4) == pytest.approx(1e-3)
        assert cosine_lr(99, 100, 1e-3, 1e-4) == pytest.approx(1e-4)

    def test_monotone(self):
        lrs = [cosine_lr(s, 50, 1e-3, 1e-4) for s in range(50)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))


class TestCheckpoint:
    @pytest.fixture
    def params(self, rng):
        return {"w": rng.standard_normal((3, 4)), "b": rng.standard_normal(4), "s": np.array(2.5)}

    def test_round_trip_is_bit_exact(self, tmp_path, params):
        path = tmp_path / "p.ckpt"
        save_params(path, params, meta={"note": "x"})
        loaded, meta = load_params(path)
        assert meta == {"note": "x"}
        assert list(loaded) == list(params)
        for k in params:
            assert loaded[k].shape == params[k].shape
            assert loaded[k].tobytes() == np.asarray(params[k], dtype="<f8").tobytes()

    def test_corrupt_payload(self, tmp_path, params):
        path = tmp_path / "p.ckpt"
        save_params(path, params)
        raw = bytearray(path.read_bytes())
        raw[-3] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(ChecksumError):
            load_params(path)

    def test_truncated(self, tmp_path, params):
        path = tmp_path / "p.ckpt"
        save_params(path, params)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FormatError):
            load_params(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "p.ckpt"
        path.write_bytes(b"NOTACKPT" + bytes(16))
        with pytest.raises(FormatError):
            load_params(path)

    def test_unknown_version(self, tmp_path, params):
        path = tmp_path / "p.ckpt"
        save_params(path, params)
        raw = path.read_bytes()
        path.write_bytes(raw.replace(b'"format_version": 1', b'"format_version": 9', 1))
        with pytest.raises(VersionError):
            load_params(path)
