import numpy as np
import pytest

from cometsim import numerics as nx
from cometsim.model import (
    ComposedModel,
    NetworkConfig,
    StudentTeacherPair,
    ema_update,
    forward_features,
    forward_logits,
    forward_probs,
    forward_projection,
    init_backbone,
    load_checkpoint,
    save_checkpoint,
)

CONFIG = NetworkConfig(input_dim=3, num_known_classes=4, feature_dim=5, projection_dim=2, g_hidden=(6,), proj_hidden=3)


def test_parameter_shapes_and_init_range():
    model = ComposedModel.initialize(CONFIG, np.random.default_rng(0))
    shapes = {k: v.shape for k, v in model.params.items()}
    assert shapes == {
        "g.w1": (3, 6), "g.b1": (6,), "g.w2": (6, 5), "g.b2": (5,),
        "h.w": (5, 4), "h.b": (4,),
        "proj.w1": (5, 3), "proj.b1": (3,), "proj.w2": (3, 2), "proj.b2": (2,),
    }
    assert np.abs(model.params["g.w1"]).max() <= 1 / np.sqrt(3)
    assert not model.params["g.b1"].any()


def test_forward_golden_values():
    config = NetworkConfig(input_dim=2, num_known_classes=2, feature_dim=2, projection_dim=2, g_hidden=(), proj_hidden=2)
    eye = np.eye(2)
    params = {
        "g.w1": np.array([[1.0, -1.0], [0.5, 2.0]]), "g.b1": np.array([0.0, 1.0]),
        "h.w": eye, "h.b": np.zeros(2),
        "proj.w1": eye, "proj.b1": np.zeros(2), "proj.w2": 2 * eye, "proj.b2": np.ones(2),
    }
    x = np.array([[1.0, 1.0]])
    feats = forward_features(params, x)
    np.testing.assert_allclose(feats.data, [[1.5, 2.0]])
    np.testing.assert_allclose(forward_logits(params, feats).data, [[1.5, 2.0]])
    p = forward_probs(params, feats).data
    np.testing.assert_allclose(p, [[1 / (1 + np.exp(0.5)), 1 / (1 + np.exp(-0.5))]])
    np.testing.assert_allclose(forward_projection(params, feats).data, [[4.0, 5.0]])
    assert ComposedModel(config, params).features(x).shape == (1, 2)


def test_forward_shape_mismatch():
    params = init_backbone(CONFIG, np.random.default_rng(0))
    with pytest.raises(nx.ShapeError, match="forward_features"):
        forward_features(params, np.ones((2, 4)))


@pytest.mark.parametrize("steps", [1, 10, 1000])
def test_ema_closed_form(steps):
    alpha = 0.999
    rng = np.random.default_rng(steps)
    student = ComposedModel.initialize(CONFIG, rng)
    teacher = ComposedModel.initialize(CONFIG, rng)
    w0 = teacher.copy().params
    pair = StudentTeacherPair(student, teacher, alpha)
    for _ in range(steps):
        ema_update(pair)
    a = alpha**steps
    for name in w0:
        np.testing.assert_allclose(pair.teacher.params[name], a * w0[name] + (1 - a) * student.params[name], atol=1e-10, rtol=0)
    assert pair.ema_steps == steps


def test_ema_alpha_one_freezes_teacher_and_zero_copies_student():
    rng = np.random.default_rng(1)
    frozen = StudentTeacherPair(ComposedModel.initialize(CONFIG, rng), ComposedModel.initialize(CONFIG, rng), 1.0)
    before = frozen.teacher.copy().params
    ema_update(frozen)
    for k in before:
        np.testing.assert_array_equal(frozen.teacher.params[k], before[k])
    copy = StudentTeacherPair(ComposedModel.initialize(CONFIG, rng), ComposedModel.initialize(CONFIG, rng), 0.0)
    ema_update(copy)
    for k in before:
        np.testing.assert_array_equal(copy.teacher.params[k], copy.student.params[k])


def test_pair_rejects_mismatched_structure():
    rng = np.random.default_rng(2)
    other = NetworkConfig(input_dim=3, num_known_classes=4, feature_dim=6)
    with pytest.raises(ValueError):
        StudentTeacherPair(ComposedModel.initialize(CONFIG, rng), ComposedModel.initialize(other, rng))
    with pytest.raises(ValueError):
        StudentTeacherPair(ComposedModel.initialize(CONFIG, rng), ComposedModel.initialize(CONFIG, rng), 1.5)


def test_checkpoint_round_trip_is_exact_and_byte_stable(tmp_path):
    model = ComposedModel.initialize(CONFIG, np.random.default_rng(3))
    extra = {"counts": np.arange(4)}
    a, b = tmp_path / "a.npz", tmp_path / "b.npz"
    save_checkpoint(a, model, extra)
    save_checkpoint(b, model.copy(), extra)
    assert a.read_bytes() == b.read_bytes()
    loaded, loaded_extra = load_checkpoint(a)
    assert loaded.config == CONFIG
    for k, v in model.params.items():
        np.testing.assert_array_equal(loaded.params[k], v)
    np.testing.assert_array_equal(loaded_extra["counts"], extra["counts"])
    assert not list(tmp_path.glob(".*tmp"))
