import numpy as np
import pytest

from tristounet.nn import (
    DegenerateEmbeddingError,
    DenseParams,
    LstmParams,
    ModelFormatError,
    TristouNetParams,
    average_pool,
    embed,
    embed_backward,
    embed_batch,
    embed_many,
    init_params,
    load_params,
    lstm_backward,
    lstm_forward,
    parameter_count,
    read_model_file,
    save_params,
)

SMALL = (6, 4, 4, 3)


def scalar_lstm(p: LstmParams, x: np.ndarray, reverse: bool = False) -> np.ndarray:
    """Straight-line reference LSTM, one unit and one gate at a time."""
    steps = x.shape[0]
    units = p.units
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    h = [0.0] * units
    c = [0.0] * units
    out = np.zeros((steps, units))
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    for t in order:
        pre = [[p.biases[g, j] + sum(p.input_weights[g, j, k] * x[t, k] for k in range(x.shape[1]))
                + sum(p.recurrent_weights[g, j, k] * h[k] for k in range(units)) for j in range(units)]
               for g in range(4)]
        new_c = [sig(pre[1][j]) * c[j] + sig(pre[0][j]) * np.tanh(pre[2][j]) for j in range(units)]
        h = [sig(pre[3][j]) * np.tanh(new_c[j]) for j in range(units)]
        c = new_c
        out[t] = h
    return out


class TestInit:
    def test_parameter_count(self):
        # hand count: each LSTM has 4 gates of (W: 16x35, U: 16x16, b: 16)
        per_lstm = 4 * (16 * 35 + 16 * 16 + 16)
        assert per_lstm == 3328
        dense = (16 * 32 + 16) + (16 * 16 + 16)
        assert 2 * per_lstm + dense == 7456
        assert parameter_count((35, 16, 16, 16)) == 7456
        assert init_params((35, 16, 16, 16), 0).size == 7456

    def test_deterministic(self):
        a, b = init_params(SMALL, 3), init_params(SMALL, 3)
        for name, array in a.arrays().items():
            np.testing.assert_array_equal(array, b.arrays()[name])

    def test_forget_bias_and_orthogonal(self):
        p = init_params((35, 16, 16, 16), 1)
        for lstm in (p.forward_lstm, p.backward_lstm):
            np.testing.assert_array_equal(lstm.biases[1], 1.0)
            np.testing.assert_array_equal(lstm.biases[[0, 2, 3]], 0.0)
            for u in lstm.recurrent_weights:
                np.testing.assert_allclose(u @ u.T, np.eye(16), atol=1e-12)
        limit = np.sqrt(6.0 / (35 + 16))
        assert np.abs(p.forward_lstm.input_weights).max() <= limit

    def test_invalid_dims(self):
        with pytest.raises(ValueError):
            init_params((0, 4, 4, 4))


class TestLstm:
    def test_zero_weights(self):
        p = LstmParams(np.zeros((4, 3, 5)), np.zeros((4, 3, 3)), np.zeros((4, 3)))
        out, _ = lstm_forward(p, np.random.default_rng(0).standard_normal((8, 5)))
        np.testing.assert_array_equal(out, 0.0)

    def test_single_step_direction_free(self):
        p = init_params(SMALL, 2).forward_lstm
        x = np.random.default_rng(1).standard_normal((1, 6))
        np.testing.assert_allclose(lstm_forward(p, x)[0], lstm_forward(p, x, reverse=True)[0])

    @pytest.mark.parametrize("reverse", [False, True])
    def test_scalar_oracle(self, reverse):
        rng = np.random.default_rng(7)
        p = init_params(SMALL, rng).forward_lstm
        p.biases[:] = rng.standard_normal(p.biases.shape)
        x = rng.standard_normal((5, 6))
        out, _ = lstm_forward(p, x, reverse=reverse)
        np.testing.assert_allclose(out[0], scalar_lstm(p, x, reverse), atol=1e-12)

    def test_dimension_mismatch(self):
        p = init_params(SMALL, 0).forward_lstm
        with pytest.raises(ValueError):
            lstm_forward(p, np.zeros((3, 7)))

    def test_backward_finite_differences(self):
        rng = np.random.default_rng(3)
        p = init_params(SMALL, rng).forward_lstm
        x = rng.standard_normal((2, 5, 6))
        g = rng.standard_normal((2, 5, 4))
        _, cache = lstm_forward(p, x, reverse=True)
        grads = lstm_backward(p, cache, g)
        for attr in ("input_weights", "recurrent_weights", "biases"):
            array = getattr(p, attr)
            numeric = np.zeros_like(array)
            for idx in np.ndindex(array.shape):
                old = array[idx]
                array[idx] = old + 1e-5
                up = np.sum(lstm_forward(p, x, reverse=True)[0] * g)
                array[idx] = old - 1e-5
                down = np.sum(lstm_forward(p, x, reverse=True)[0] * g)
                array[idx] = old
                numeric[idx] = (up - down) / 2e-5
            np.testing.assert_allclose(getattr(grads, attr), numeric, rtol=1e-6, atol=1e-8)


class TestPool:
    def test_constant(self):
        np.testing.assert_array_equal(average_pool(np.tile([1.0, -2.0], (4, 1))), [1.0, -2.0])

    def test_two_rows(self):
        np.testing.assert_array_equal(average_pool(np.array([[0.0], [2.0]])), [1.0])

    def test_random(self):
        x = np.random.default_rng(0).standard_normal((5, 3))
        expected = [sum(x[t, j] for t in range(5)) / 5 for j in range(3)]
        np.testing.assert_allclose(average_pool(x), expected)


class TestEmbed:
    def test_unit_norm(self):
        p = init_params((35, 16, 16, 16), 0)
        x = np.random.default_rng(0).standard_normal((200, 20, 35))
        norms = np.linalg.norm(embed_many(p, x), axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)

    def test_single_vs_batch(self):
        p = init_params(SMALL, 0)
        x = np.random.default_rng(0).standard_normal((3, 9, 6))
        batch, _ = embed_batch(p, x)
        single, _ = embed(p, x[1])
        assert single.shape == (3,)
        np.testing.assert_allclose(single, batch[1], atol=1e-14)

    def test_variable_length(self):
        p = init_params(SMALL, 0)
        for steps in (1, 2, 17):
            y, _ = embed(p, np.ones((steps, 6)))
            assert y.shape == (3,)

    def test_equal_inputs_equal_embeddings(self):
        p = init_params(SMALL, 0)
        x = np.full((1, 6), 0.3)
        np.testing.assert_array_equal(embed(p, x)[0], embed(p, x.copy())[0])

    def test_different_inputs_differ(self):
        p = init_params(SMALL, 0)
        rng = np.random.default_rng(1)
        a, b = embed(p, rng.standard_normal((10, 6)))[0], embed(p, rng.standard_normal((10, 6)))[0]
        assert np.linalg.norm(a - b) > 1e-6

    def test_degenerate(self):
        p = init_params(SMALL, 0)
        p.dense2.weights[:] = 0.0
        with pytest.raises(DegenerateEmbeddingError):
            embed(p, np.zeros((3, 6)))

    def test_distance_identity(self):
        p = init_params(SMALL, 0)
        y = embed_many(p, np.random.default_rng(2).standard_normal((20, 5, 6)))
        sq = np.sum((y[:, None] - y[None]) ** 2, axis=-1)
        np.testing.assert_allclose(sq, 2.0 - 2.0 * y @ y.T, atol=1e-12)
        assert sq.min() >= -1e-12 and sq.max() <= 4.0 + 1e-12


class TestBackward:
    def test_zero_grad(self):
        p = init_params(SMALL, 0)
        _, cache = embed(p, np.random.default_rng(0).standard_normal((7, 6)))
        grads = embed_backward(cache, np.zeros(3))
        for array in grads.arrays().values():
            np.testing.assert_array_equal(array, 0.0)

    def test_parallel_grad_projected_out(self):
        p = init_params(SMALL, 0)
        y, cache = embed(p, np.random.default_rng(0).standard_normal((7, 6)))
        grads = embed_backward(cache, 2.5 * y)
        for array in grads.arrays().values():
            np.testing.assert_allclose(array, 0.0, atol=1e-12)

    def test_finite_differences(self):
        rng = np.random.default_rng(11)
        p = init_params(SMALL, rng)
        x = rng.standard_normal((2, 7, 6))
        g = rng.standard_normal((2, 3))
        _, cache = embed_batch(p, x)
        analytic = embed_backward(cache, g).arrays()
        for name, array in p.arrays().items():
            numeric = np.zeros_like(array)
            for idx in np.ndindex(array.shape):
                old = array[idx]
                array[idx] = old + 1e-5
                up = np.sum(embed_batch(p, x)[0] * g)
                array[idx] = old - 1e-5
                down = np.sum(embed_batch(p, x)[0] * g)
                array[idx] = old
                numeric[idx] = (up - down) / 2e-5
            rel = np.abs(analytic[name] - numeric).max() / max(np.abs(numeric).max(), 1e-12)
            assert rel < 1e-4, name

    def test_batch_gradient_is_sum(self):
        rng = np.random.default_rng(4)
        p = init_params(SMALL, rng)
        x = rng.standard_normal((3, 5, 6))
        g = rng.standard_normal((3, 3))
        total = embed_backward(embed_batch(p, x)[1], g).arrays()
        parts = [embed_backward(embed(p, x[b])[1], g[b]).arrays() for b in range(3)]
        for name in total:
            np.testing.assert_allclose(total[name], sum(part[name] for part in parts), atol=1e-12)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        p = init_params((35, 16, 16, 16), 5)
        path = tmp_path / "model.bin"
        save_params(p, path, meta={"seed": 5})
        q = load_params(path)
        for name, array in p.arrays().items():
            assert np.array_equal(array, q.arrays()[name])
        header, _ = read_model_file(path)
        assert header["dims"] == [35, 16, 16, 16]
        assert header["meta"] == {"seed": 5}

    def test_byte_layout(self, tmp_path):
        p = init_params(SMALL, 0)
        path = tmp_path / "model.bin"
        save_params(p, path)
        data = path.read_bytes()
        assert data[:8] == b"TRSTNET\x00"
        header_len = int.from_bytes(data[8:16], "little")
        assert len(data) == 16 + header_len + 8 * parameter_count(SMALL)

    def test_extra_arrays(self, tmp_path):
        p = init_params(SMALL, 0)
        path = tmp_path / "model.bin"
        save_params(p, path, extra={"acc": np.arange(4.0)})
        _, arrays = read_model_file(path)
        np.testing.assert_array_equal(arrays["extra.acc"], np.arange(4.0))
        load_params(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "model.bin"
        save_params(init_params(SMALL, 0), path)
        path.write_bytes(path.read_bytes()[:-9])
        with pytest.raises(ModelFormatError):
            load_params(path)

    def test_not_a_model(self, tmp_path):
        path = tmp_path / "model.bin"
        path.write_bytes(b"hello world, not a model")
        with pytest.raises(ModelFormatError):
            load_params(path)

    def test_input_dim_mismatch(self, tmp_path):
        path = tmp_path / "model.bin"
        save_params(init_params((35, 16, 16, 16), 0), path)
        with pytest.raises(ModelFormatError, match="12"):
            load_params(path, input_dim=12)

    def test_non_finite(self, tmp_path):
        p = init_params(SMALL, 0)
        p.dense1.bias[0] = np.nan
        path = tmp_path / "model.bin"
        save_params(p, path)
        with pytest.raises(ModelFormatError):
            load_params(path)

    def test_shape_validation(self):
        p = init_params(SMALL, 0)
        arrays = dict(p.arrays())
        arrays["dense2.bias"] = np.zeros(5)
        with pytest.raises(ModelFormatError):
            TristouNetParams.from_arrays(arrays)
