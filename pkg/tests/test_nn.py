import numpy as np
import pytest

from wvgnn import tensor as T
from wvgnn.exceptions import NonFiniteError, ShapeError
from wvgnn.model import IcgnnModel
from wvgnn.nn import Adam, AdamState, Mlp, MlpSpec, adam_step, load_mlp, mlp_forward, save_mlp


def _zeroed(spec):
    mlp = Mlp(spec, rng=0)
    for p in mlp.weights + mlp.biases:
        p.data = np.zeros_like(p.data)
    return mlp


def test_zero_network_outputs():
    x = np.random.default_rng(0).standard_normal((5, 3))
    assert np.all(_zeroed(MlpSpec((3, 8, 2), "sigmoid"))(x).data == 0.5)
    assert np.all(_zeroed(MlpSpec((3, 8, 2), "tanh"))(x).data == 0.0)


def test_width_mismatch_raises():
    with pytest.raises(ShapeError):
        Mlp(MlpSpec((3, 4, 1)), rng=0)(np.ones((2, 4)))


def test_eval_mode_is_pure(rng):
    mlp = Mlp(MlpSpec((4, 16, 8, 2), "sigmoid"), rng=1)
    x = rng.standard_normal((7, 4))
    a = mlp(x).data
    mlp(rng.standard_normal((7, 4)), training=True)  # moves running stats
    b = mlp(x).data
    assert not np.array_equal(a, b)
    assert np.array_equal(mlp(x).data, b)


def test_training_mode_commutes_with_row_permutation(rng):
    mlp = Mlp(MlpSpec((4, 16, 2), "sigmoid"), rng=2)
    x = rng.standard_normal((9, 4))
    perm = rng.permutation(9)
    np.testing.assert_allclose(mlp(x[perm], training=True).data, mlp(x, training=True).data[perm], atol=1e-14)


def test_sigmoid_head_is_strictly_inside_unit_interval(rng):
    out = Mlp(MlpSpec((3, 8, 4), "sigmoid"), rng=3)(rng.standard_normal((50, 3)) * 10).data
    assert np.all((out > 0) & (out < 1))


def test_icgnn_layer_widths():
    n_t = 8
    m = IcgnnModel(2 * n_t, 2)
    assert m.message_spec.widths == (4 * n_t + 2, 128, 256, 64)
    assert m.update_spec.widths == (2 * n_t + 66, 128, 32, 2)
    cf = IcgnnModel(1, 1, message_hidden=(32, 128), update_hidden=(128, 32))
    assert cf.message_spec.widths == (3, 32, 128, 64)
    assert cf.update_spec.widths == (66, 128, 32, 1)


def test_adam_zero_gradient_leaves_params():
    p = [T.Tensor(np.array([1.0, -2.0]), requires_grad=True)]
    adam_step(p, [np.zeros(2)], AdamState())
    np.testing.assert_array_equal(p[0].data, [1.0, -2.0])


def test_adam_first_step_closed_form():
    # after one step m_hat = g and v_hat = g^2, so the update is lr * g / (|g| + eps)
    g = np.array([0.3, -2.0, 1e-3])
    p = [T.Tensor(np.zeros(3), requires_grad=True)]
    state = AdamState(lr=1e-3)
    adam_step(p, [g], state)
    np.testing.assert_allclose(p[0].data, -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    assert state.step == 1


def test_adam_runs_are_bit_identical(rng):
    grads = [rng.standard_normal((3, 2)) for _ in range(5)]

    def run():
        p = [T.Tensor(np.ones((3, 2)), requires_grad=True)]
        opt = Adam(p)
        for g in grads:
            opt.step([g])
        return p[0].data

    assert np.array_equal(run(), run())


def test_adam_rejects_nonfinite_gradient():
    p = [T.Tensor(np.zeros(2), requires_grad=True), T.Tensor(np.zeros(3), requires_grad=True)]
    with pytest.raises(NonFiniteError, match="block 1"):
        adam_step(p, [np.zeros(2), np.array([0.0, np.nan, 0.0])], AdamState())


def test_mlp_checkpoint_roundtrip(tmp_path, rng):
    mlp = Mlp(MlpSpec((3, 5, 2), "sigmoid"), rng=4)
    mlp(rng.standard_normal((6, 3)), training=True)
    save_mlp(tmp_path / "m.npz", mlp)
    back = load_mlp(tmp_path / "m.npz")
    x = rng.standard_normal((4, 3))
    assert np.array_equal(mlp_forward(back, x).data, mlp_forward(mlp, x).data)
