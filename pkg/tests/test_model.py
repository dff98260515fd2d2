import numpy as np
import pytest

from hyperpose import tensor as T
from hyperpose.config import ConfigError, ModelConfig, desk_model
from hyperpose.geometry import position_loss
from hyperpose.model import (GeneratedHeadWeights, HeadSpec, HyperPoseModel, StageShapeError, apply_adaptive_head,
                             compose_residual)
from hyperpose.tensor import ShapeError, Tensor


def images(n, size=32, seed=0):
    return np.random.default_rng(seed).random((n, 3, size, size)).astype(np.float32)


@pytest.fixture(scope="module")
def desk():
    return HyperPoseModel(desk_model(), rng=0)


def test_default_head_specs():
    cfg = ModelConfig()
    pos = HeadSpec(cfg.main_dim, cfg.position_head)
    ori = HeadSpec(cfg.main_dim, cfg.orientation_head)
    assert pos.layer_shapes == [(256, 512), (512, 256), (256, 3)]
    assert ori.layer_shapes == [(256, 512), (512, 512), (512, 4)]
    assert pos.generated_layers(1) == [2]
    assert pos.generated_layers(2) == [0, 2]
    assert pos.generated_layers(3) == [0, 1, 2]
    assert pos.generated_size(1) == 256 * 3 + 3
    assert pos.generated_size(3, with_bias=False) == 256 * 512 + 512 * 256 + 256 * 3


def test_orientation_width_follows_representation():
    assert ModelConfig(rotation_repr="6d").orientation_head[-1] == 6
    assert desk_model(rotation_repr="4dnorm").orientation_head[-1] == 4


def test_desk_forward_shapes(desk):
    out = desk.forward(images(3))
    assert out.position.shape == (3, 3)
    assert out.orientation.shape == (3, 4)
    assert out.diagnostics["latent_position"].shape == (3, 16)
    assert out.diagnostics["hyper_latent_orientation"].shape == (3, 32)
    assert out.weights["position"].shapes() == [(16, 32), (32, 16), (16, 3)]
    assert out.weights["position"].flatten().shape == (3, out.weights["position"].count())
    assert desk.sequence_shapes()["position"] == (desk.backbone.tap_shape(4)[1] ** 2 + 1, 16)


def test_single_image_accepted(desk):
    out = desk.forward(images(1)[0])
    assert out.position.shape == (1, 3)


def test_backbone_runs_once_per_forward(desk):
    before = desk.backbone.calls
    desk.forward(images(2))
    assert desk.backbone.calls == before + 1


def test_wrong_input_size_names_stage(desk):
    with pytest.raises(StageShapeError) as err:
        desk.forward(images(1, size=40))
    assert "backbone.input" in str(err.value)


def test_eval_forward_deterministic():
    model = HyperPoseModel(desk_model(dropout=0.2), rng=1)
    x = images(2)
    a, b = model.forward(x), model.forward(x)
    assert np.array_equal(a.position.data, b.position.data)
    assert np.array_equal(a.orientation.data, b.orientation.data)


def test_distinct_images_get_distinct_weights(desk):
    out = desk.forward(images(2, seed=4))
    flat = out.weights["orientation"].flatten()
    assert not np.allclose(flat[0], flat[1])


def test_zero_generators_reduce_to_fixed_head():
    model = HyperPoseModel(desk_model(output_mode="direct"), rng=2)
    for gen in model.position.generators.values():
        gen.fc2.weight.data[:] = 0.0
    out = model.forward(images(2, seed=5))
    flat = out.weights["position"].flatten()
    assert np.array_equal(flat[0], flat[1])
    # The head is now an ordinary MLP whose parameters are the generators' output biases.
    h = out.diagnostics["latent_position"].astype(np.float64)
    for i, (c_in, c_out) in enumerate(model.head_specs["position"].layer_shapes):
        bias = model.position.generators[str(i)].fc2.bias.data
        h = h @ bias[: c_in * c_out].reshape(c_in, c_out) + bias[c_in * c_out:]
        if i < 2:
            h = h / (1 + np.exp(-h))
    assert np.allclose(out.position.data, h, atol=1e-5)


def test_direct_mode_has_no_static_head():
    model = HyperPoseModel(desk_model(output_mode="direct"), rng=0)
    assert model.position.static_head is None
    assert not any("static_head" in n for n, _ in model.named_parameters())


def test_residual_static_head_receives_gradient():
    model = HyperPoseModel(desk_model(), rng=0)
    out = model.forward(images(2))
    position_loss(out.position, np.zeros((2, 3))).sum().backward()
    grads = [p.grad for n, p in model.named_parameters() if n.startswith("position.static_head.")]
    assert grads and all(g is not None and np.abs(g).sum() > 0 for g in grads)
    ori = [p.grad for n, p in model.named_parameters() if n.startswith("orientation.")]
    assert all(g is None or not g.any() for g in ori)


def _one_layer_weights(w, b):
    spec = HeadSpec(w.shape[-2], (w.shape[-1],))
    return GeneratedHeadWeights(spec, [0], [Tensor(w)], [None if b is None else Tensor(b)])


def test_adaptive_head_zero_weights_give_bias():
    b = np.array([[0.5, -1.0, 2.0]])
    out = apply_adaptive_head(Tensor(np.ones((1, 4))), _one_layer_weights(np.zeros((1, 4, 3)), b))
    assert np.allclose(out.data, b)


def test_adaptive_head_identity_weights():
    x = np.random.default_rng(0).normal(size=(2, 3))
    w = np.broadcast_to(np.eye(3), (2, 3, 3)).copy()
    out = apply_adaptive_head(Tensor(x), _one_layer_weights(w, None))
    assert np.allclose(out.data, x)


def test_adaptive_head_uses_per_image_weights():
    x = np.ones((2, 2))
    w = np.stack([np.eye(2), 2 * np.eye(2)])
    out = apply_adaptive_head(Tensor(x), _one_layer_weights(w, None)).data
    assert np.allclose(out, [[1, 1], [2, 2]])


def test_adaptive_head_checks_latent_width():
    with pytest.raises(ShapeError):
        apply_adaptive_head(Tensor(np.ones((1, 5))), _one_layer_weights(np.zeros((1, 4, 3)), None))


def test_compose_residual():
    a, b = Tensor([[1.0, 2.0]]), Tensor([[0.5, 0.5]])
    assert np.allclose(compose_residual(a, b, "residual").data, [[1.5, 2.5]])
    assert compose_residual(None, b, "direct") is b
    with pytest.raises(ShapeError):
        compose_residual(Tensor([[1.0]]), b, "residual")
    with pytest.raises(ValueError):
        compose_residual(a, b, "sum")


def test_backbone_embedding_variant():
    model = HyperPoseModel(desk_model(hypernet_arch="backbone_embedding"), rng=0)
    assert model.position.hyper_encoder is None
    out = model.forward(images(2))
    assert out.diagnostics["hyper_latent_position"].shape == (2, 32)
    assert any(n.startswith("backbone.terminal.") for n, _ in model.named_parameters())


@pytest.mark.parametrize("layers,expected", [(1, 1), (2, 2), (3, 3)])
def test_regressed_layer_count(layers, expected):
    model = HyperPoseModel(desk_model(regressed_layers=layers), rng=0)
    out = model.forward(images(1))
    assert len(out.weights["position"].weights) == expected
    assert len(model.position.static_layers) == 3 - expected


def test_six_d_output_converts_to_unit_quaternion():
    model = HyperPoseModel(desk_model(rotation_repr="6d"), rng=0)
    out = model.forward(images(2))
    assert out.orientation.shape == (2, 6)
    assert np.allclose(np.linalg.norm(out.quaternions(), axis=1), 1.0)


def test_state_dict_round_trip(desk):
    other = HyperPoseModel(desk_model(), rng=9)
    other.load_state_dict(desk.state_dict())
    x = images(2)
    assert np.array_equal(other.forward(x).position.data, desk.forward(x).position.data)
    state = desk.state_dict()
    state.pop(next(iter(state)))
    with pytest.raises(KeyError):
        other.load_state_dict(state)


def test_branch_parameter_scopes(desk):
    branch = desk.branch_parameter_names("position")
    heads = desk.branch_parameter_names("position", "heads")
    assert set(heads) < set(branch)
    assert all("encoder" not in n for n in heads)
    assert not any(n.startswith("orientation.") for n in branch)


def test_invalid_model_configs():
    with pytest.raises(ConfigError, match="rotation_repr"):
        ModelConfig(rotation_repr="euler")
    with pytest.raises(ConfigError, match="main_dim"):
        desk_model(main_dim=18)
    with pytest.raises(ConfigError, match="regressed_layers"):
        desk_model(regressed_layers=4)


def test_precision_float64_model():
    with T.precision(np.float64):
        model = HyperPoseModel(desk_model(), rng=0)
        assert model.forward(images(1)).position.dtype == np.float64
