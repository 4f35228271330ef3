import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedlab.errors import ConfigurationError, DimensionError, FormatError, NumericError
from fedlab.nn import (
    Batch,
    Encoder,
    ModelParams,
    OptimizerState,
    concat_encoders,
    evaluate,
    forward,
    gradient_check,
    gradients,
    init_model,
    load_checkpoint,
    load_encoder,
    loss_ce,
    save_checkpoint,
    sgd_step,
    softmax,
    zeros_like_model,
)
from oracles import ce_row, mlp_forward, softmax_regression_grad


def _batch(rng, n, d, m):
    return Batch(rng.uniform(0, 1, (n, d)), rng.integers(0, m, n))


class _Set:
    def __init__(self, x, y):
        self.inputs, self.labels = np.asarray(x, float), np.asarray(y)


def test_zero_model_gives_uniform_softmax():
    model = zeros_like_model(init_model((5, 7, 4), 0))
    _, logits = forward(model, np.random.default_rng(0).normal(size=(3, 5)))
    assert np.all(logits == 0)
    assert np.allclose(softmax(logits), 0.25)


def test_identity_linear_layer():
    model = ModelParams((np.eye(2),), (np.zeros(2),))
    feats, logits = forward(model, [[1.0, 2.0]])
    assert logits.tolist() == [[1.0, 2.0]]
    assert feats.tolist() == [[1.0, 2.0]]


def test_forward_matches_loop_oracle(rng):
    model = init_model((4, 6, 3), 11)
    model = ModelParams(model.weights, tuple(rng.normal(size=b.shape) for b in model.biases))
    x = rng.uniform(0, 1, (5, 4))
    _, logits = forward(model, x)
    assert np.max(np.abs(logits - mlp_forward(model.weights, model.biases, x))) < 1e-10


def test_forward_dimension_error_names_layer():
    with pytest.raises(DimensionError, match="layer 0"):
        forward(init_model((3, 2), 0), np.zeros((1, 4)))


def test_loss_uniform_logits_is_log_m():
    assert loss_ce(np.zeros((4, 10)), [0, 3, 9, 2]) == pytest.approx(math.log(10), abs=1e-15)


def test_loss_saturated():
    logits = np.zeros((2, 3))
    logits[0, 1] = logits[1, 2] = 50.0
    assert loss_ce(logits, [1, 2]) < 1e-20


def test_loss_matches_scalar_lse(rng):
    logits = rng.normal(scale=3, size=(3, 5))
    labels = [4, 0, 2]
    expected = sum(ce_row(list(logits[i]), labels[i]) for i in range(3)) / 3
    assert abs(loss_ce(logits, labels) - expected) < 1e-10


def test_loss_label_out_of_range():
    with pytest.raises(IndexError):
        loss_ce(np.zeros((1, 3)), [3])


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=6), st.integers(0, 100))
@settings(max_examples=50, deadline=None)
def test_loss_nonnegative(row, label):
    assert loss_ce(np.array([row]), [label % len(row)]) >= 0


def test_zero_learning_rate_leaves_params(rng):
    model = init_model((3, 4, 2), 0)
    new, _ = sgd_step(model, OptimizerState(0.0, 0.9, 1e-5), _batch(rng, 5, 3, 2))
    assert new.equals(model)


def test_scalar_sgd_step_matches_hand_gradient():
    # one weight, one bias, two classes: logits = [w*x + b0, 0*x + b1]
    W = np.array([[0.3, 0.0]])
    b = np.array([0.1, -0.2])
    model = ModelParams((W,), (b,))
    x, y = 2.0, 0
    z0, z1 = 0.3 * x + 0.1, -0.2
    p0 = math.exp(z0) / (math.exp(z0) + math.exp(z1))
    g_w = (p0 - 1.0) * x
    new, _ = sgd_step(model, OptimizerState(0.5, 0.0, 0.0), Batch([[x]], [y]))
    assert new.weights[0][0, 0] == pytest.approx(0.3 - 0.5 * g_w, abs=1e-15)


def test_momentum_and_decay_accumulate(rng):
    model = init_model((3, 2), 0)
    batch = _batch(rng, 4, 3, 2)
    opt = OptimizerState(0.1, 0.9, 0.01)
    m1, o1 = sgd_step(model, opt, batch)
    _, gw, _ = gradients(model, batch.inputs, batch.labels)
    v1 = gw[0] + 0.01 * model.weights[0]
    assert np.allclose(m1.weights[0], model.weights[0] - 0.1 * v1, atol=1e-15)
    m2, _ = sgd_step(m1, o1, batch)
    _, gw2, _ = gradients(m1, batch.inputs, batch.labels)
    v2 = 0.9 * v1 + gw2[0] + 0.01 * m1.weights[0]
    assert np.allclose(m2.weights[0], m1.weights[0] - 0.1 * v2, atol=1e-15)


def test_freeze_encoder_keeps_encoder_bytes(rng):
    model = init_model((4, 5, 3, 2), 3)
    opt = OptimizerState()
    batch = _batch(rng, 6, 4, 2)
    m1, o1 = sgd_step(model, opt, batch)  # populate velocities
    m2, o2 = sgd_step(m1, o1, batch, freeze_encoder=True)
    for a, b in zip(m1.arrays()[:-2], m2.arrays()[:-2]):
        assert a.tobytes() == b.tobytes()
    for a, b in zip(o1.velocity[:-2], o2.velocity[:-2]):
        assert a.tobytes() == b.tobytes()
    assert m1.weights[-1].tobytes() != m2.weights[-1].tobytes()


def test_non_finite_gradient_raises():
    model = ModelParams((np.array([[1e308, 0.0]]),), (np.zeros(2),))
    with pytest.raises(NumericError):
        sgd_step(model, OptimizerState(), Batch([[1e308]], [1]))


def test_optimizer_state_resets_on_shape_change(rng):
    a = init_model((3, 2), 0)
    _, opt = sgd_step(a, OptimizerState(), _batch(rng, 2, 3, 2))
    b = init_model((3, 4, 2), 0)
    new, opt2 = sgd_step(b, opt, _batch(rng, 2, 3, 2))
    assert [v.shape for v in opt2.velocity] == [x.shape for x in new.arrays()]


def test_gradient_check_small_models(rng):
    for seed, dims in enumerate([(3, 4, 2), (5, 6, 4, 3), (2, 3)]):
        model = init_model(dims, seed)
        assert gradient_check(model, _batch(rng, 4, dims[0], dims[-1]), 1e-5) <= 1e-4


def test_gradient_check_bias_only_path():
    model = init_model((3, 2), 0)
    assert gradient_check(model, Batch(np.zeros((3, 3)), [0, 1, 1]), 1e-5) < 1e-7


def test_linear_gradient_matches_closed_form(rng):
    model = init_model((4, 3), 5)
    X, Y = rng.uniform(size=(7, 4)), rng.integers(0, 3, 7)
    _, gw, gb = gradients(model, X, Y)
    ew, eb = softmax_regression_grad(X, Y, model.weights[0], model.biases[0])
    assert np.max(np.abs(gw[0] - ew)) < 1e-8
    assert np.max(np.abs(gb[0] - eb)) < 1e-8


def test_gradient_check_rejects_bad_epsilon(rng):
    with pytest.raises(ValueError):
        gradient_check(init_model((2, 2), 0), _batch(rng, 1, 2, 2), 0.1)


def test_split_merge_identity():
    model = init_model((4, 8, 5, 3), 9)
    assert ModelParams.combine(model.encoder, model.classifier).equals(model)
    assert model.encoder.output_dim == 5


def test_concat_single_encoder_is_identity(rng):
    enc = init_model((4, 6, 3), 0).encoder
    x = rng.uniform(size=(5, 4))
    assert np.array_equal(concat_encoders([enc]).forward(x), enc.forward(x))


def test_concat_layout(rng):
    e1 = init_model((4, 3, 2), 0).encoder
    e2 = init_model((4, 5, 2), 1).encoder
    g = concat_encoders([e1, e2])
    x = rng.uniform(size=(2, 4))
    out = g.forward(x)
    assert g.output_dim == 8 and out.shape == (2, 8)
    assert np.array_equal(out[:, :3], e1.forward(x))


def test_concat_identical_tiles(rng):
    e = init_model((4, 3, 2), 0).encoder
    x = rng.uniform(size=(3, 4))
    assert np.array_equal(concat_encoders([e] * 5).forward(x), np.tile(e.forward(x), 5))


def test_concat_input_mismatch():
    with pytest.raises(ConfigurationError):
        concat_encoders([init_model((4, 3, 2), 0).encoder, init_model((5, 3, 2), 0).encoder])


def test_encoder_members_are_immutable():
    e = init_model((4, 3, 2), 0).encoder
    with pytest.raises(ValueError):
        e.weights[0][0, 0] = 1.0


def test_evaluate_constant_class_zero():
    model = ModelParams((np.zeros((2, 3)),), (np.array([1.0, 0.0, 0.0]),))
    assert evaluate(model, _Set(np.ones((4, 2)), [0, 0, 0, 0])) == 1.0


def test_evaluate_tie_break_lowest_index():
    model = zeros_like_model(init_model((2, 10), 0))
    ds = _Set(np.ones((20, 2)), np.repeat(np.arange(10), 2))
    assert evaluate(model, ds) == pytest.approx(0.1)


def test_evaluate_hand_count():
    # logits = x directly; predictions are per-row argmax
    model = ModelParams((np.eye(3),), (np.zeros(3),))
    x = [[1, 0, 0], [0, 2, 1], [0, 0, 5], [3, 3, 0], [0, 1, 2]]
    y = [0, 1, 1, 1, 2]  # preds 0, 1, 2, 0 (tie), 2 -> three correct
    assert evaluate(model, _Set(x, y)) == pytest.approx(3 / 5)
    assert evaluate((Encoder((), (), 3), model.classifier), _Set(x, y)) == pytest.approx(3 / 5)


def test_evaluate_empty():
    with pytest.raises(ValueError):
        evaluate(init_model((2, 2), 0), _Set(np.zeros((0, 2)), []))


def test_checkpoint_roundtrip(tmp_path):
    model = init_model((4, 6, 3), 2)
    save_checkpoint(model, tmp_path / "m.fck")
    raw = (tmp_path / "m.fck").read_bytes()
    assert raw[:4] == b"FCK1"
    assert load_checkpoint(tmp_path / "m.fck").equals(model)
    save_checkpoint(model.encoder, tmp_path / "e.fck")
    enc = load_encoder(tmp_path / "e.fck")
    assert enc.fingerprint() == model.encoder.fingerprint()


def test_checkpoint_layout_is_row_major_little_endian(tmp_path):
    model = ModelParams((np.arange(6.0).reshape(2, 3),), (np.array([7.0, 8.0, 9.0]),))
    save_checkpoint(model, tmp_path / "m.fck")
    raw = (tmp_path / "m.fck").read_bytes()
    header = b"FCK1" + (2).to_bytes(4, "little") + (2).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert raw[: len(header)] == header
    body = np.frombuffer(raw[len(header):], dtype="<f8")
    assert body.tolist() == [0, 1, 2, 3, 4, 5, 7, 8, 9]


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"XXXX\x00\x00\x00\x00")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "bad")
    model = init_model((3, 2), 0)
    save_checkpoint(model, tmp_path / "m")
    (tmp_path / "t").write_bytes((tmp_path / "m").read_bytes()[:-3])
    with pytest.raises(FormatError, match="offset"):
        load_checkpoint(tmp_path / "t")


def test_training_is_deterministic(rng):
    batch = _batch(rng, 8, 3, 2)
    runs = []
    for _ in range(2):
        model, opt = init_model((3, 5, 2), 4), OptimizerState()
        for _ in range(5):
            model, opt = sgd_step(model, opt, batch)
        runs.append(model)
    assert runs[0].equals(runs[1])
