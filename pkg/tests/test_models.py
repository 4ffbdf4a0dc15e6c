import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from gradcheck import sampled_gradcheck
from moodshift.errors import ConfigError, InferenceError
from moodshift.models import (
    CLASS_ORDER,
    CnnBranchSpec,
    DistillationConfig,
    FusionSpec,
    TrainedModel,
    build_1cnn,
    build_2cnn,
    build_2cnn_mlp,
    build_tsnet,
    cross_entropy,
    distillation_loss,
    load_checkpoint,
    parameter_checksum,
    predict,
    save_checkpoint,
    softened,
    tsnet_loss,
    two_branch_loss,
)

# Traced by hand: 'same' conv with stride 3 gives ceil(n / 3), 'same' pool with
# stride 2 gives ceil(n / 2), applied to (frames, H, W) = (5, 32, 32).
SHAPE_TABLE = {
    "conv1": (16, 2, 11, 11),
    "pool1": (16, 1, 6, 6),
    "conv2": (32, 1, 2, 2),
    "pool2": (32, 1, 1, 1),
    "conv3": (32, 1, 1, 1),
    "pool3": (32, 1, 1, 1),
}


def batch(n=4, seed=0):
    return torch.rand(n, 3, 5, 32, 32, generator=torch.Generator().manual_seed(seed))


def trained(model):
    model.trained = True
    return model


def test_1cnn_softmax_normalized():
    m = build_1cnn(seed=0).eval()
    probs = torch.softmax(m(batch()), -1)
    assert probs.shape == (4, 3)
    assert torch.allclose(probs.sum(-1), torch.ones(4), atol=1e-6)


def test_1cnn_seeded_init_identical():
    a, b = build_1cnn(seed=9), build_1cnn(seed=9)
    assert parameter_checksum(a) == parameter_checksum(b)
    assert parameter_checksum(a) != parameter_checksum(build_1cnn(seed=10))


def test_layer_shapes_match_hand_trace():
    m = build_1cnn(seed=0).eval()
    seen = {}
    hooks = [getattr(m, name).register_forward_hook(
        lambda mod, i, o, name=name: seen.__setitem__(name, tuple(o.shape[1:])))
        for name in SHAPE_TABLE]
    m(batch(2))
    for h in hooks:
        h.remove()
    assert seen == SHAPE_TABLE
    spec_table = dict(m.spec.stage_shapes())
    assert {k: spec_table[k] for k in SHAPE_TABLE} == SHAPE_TABLE
    assert spec_table["flatten"] == (32,) and spec_table["dense"] == (512,)
    assert m.norm.num_features == 32 and m.dense.out_features == 512
    assert m.head.out_features == 3


def test_layer_order():
    names = [n for n, _ in build_1cnn().named_children()]
    assert names == ["attention", "conv1", "pool1", "conv2", "pool2", "conv3", "pool3",
                     "norm", "dense", "dropout", "head"]


@pytest.mark.parametrize("kwargs", [dict(conv_channels=(16, 32)), dict(classes=4),
                                    dict(dropout_rate=1.0), dict(kernel=0)])
def test_bad_branch_spec(kwargs):
    with pytest.raises(ConfigError):
        CnnBranchSpec(**kwargs)


def test_fusion_concatenates_mood_then_delta():
    mood, delta = trained(build_1cnn(seed=1)), trained(build_1cnn(seed=2))
    fused_model = build_2cnn_mlp(mood, delta, FusionSpec(), seed=0).eval()
    x = batch(3)
    fused = fused_model.fused_features(x)
    assert fused.shape == (3, 1024)
    assert torch.equal(fused, torch.cat([mood.features(x), delta.features(x)], 1))


def test_fusion_zero_final_layer_uniform():
    m = build_2cnn_mlp(trained(build_1cnn(seed=1)), trained(build_1cnn(seed=2))).eval()
    with torch.no_grad():
        m.mlp[-1].weight.zero_()
        m.mlp[-1].bias.zero_()
    assert torch.allclose(torch.softmax(m(batch()), -1), torch.full((4, 3), 1 / 3))


def test_fusion_width_check():
    small = CnnBranchSpec(dense_units=256)
    with pytest.raises(ConfigError):
        build_2cnn_mlp(trained(build_1cnn(small)), trained(build_1cnn()))
    with pytest.raises(ConfigError):
        build_2cnn_mlp(build_1cnn(), trained(build_1cnn()))


def test_fusion_branches_frozen():
    m = build_2cnn_mlp(trained(build_1cnn(seed=1)), trained(build_1cnn(seed=2)))
    m.train()
    assert not m.mood_branch.training and not m.delta_branch.training
    trainable = {n for n, p in m.named_parameters() if p.requires_grad}
    assert trainable and all(n.startswith("mlp.") for n in trainable)


def test_two_branch_loss_zero_on_perfect_predictions():
    targets = torch.tensor([0, 1, 2])
    perfect = torch.full((3, 3), -100.0)
    perfect[torch.arange(3), targets] = 100.0
    assert two_branch_loss(perfect, perfect, targets, targets).item() == 0.0


def test_two_branch_loss_is_sum():
    m = build_2cnn(seed=0).eval()
    x, ym, yd = batch(), torch.tensor([0, 1, 2, 0]), torch.tensor([2, 2, 1, 0])
    mood, delta = m.forward_both(x)
    total = two_branch_loss(mood, delta, ym, yd)
    assert total.item() == pytest.approx(
        cross_entropy(mood, ym).item() + cross_entropy(delta, yd).item(), abs=1e-6)


def test_2cnn_inference_reads_mood_head():
    m = build_2cnn(seed=0).eval()
    x = batch()
    out = m(x)
    assert out.shape == (4, 3)
    assert torch.equal(out, m.forward_both(x)[0])


def test_2cnn_shared_attention_couples_branches():
    m = build_2cnn(attention="spatial", seed=0)
    assert m.mood_branch.attention_tag == "none"
    x, y = batch(), torch.tensor([0, 1, 2, 0])
    _, delta = m.forward_both(x)
    cross_entropy(delta, y).backward()
    assert m.attention.conv.weight.grad.abs().sum() > 0
    assert m.mood_branch.head.weight.grad is None


def _teacher():
    t = build_2cnn_mlp(trained(build_1cnn(seed=1)), trained(build_1cnn(seed=2)), seed=3)
    return trained(t)


def test_tsnet_requires_trained_teacher():
    with pytest.raises(ConfigError):
        build_tsnet(build_2cnn_mlp(trained(build_1cnn()), trained(build_1cnn())))


def test_tsnet_alpha_one_is_student_loss():
    g = torch.Generator().manual_seed(0)
    s, t = torch.randn(8, 3, generator=g, dtype=torch.float64), torch.randn(8, 3, generator=g, dtype=torch.float64)
    y = torch.randint(0, 3, (8,), generator=g)
    for temp in (3.0, 5.0, 7.0):
        cfg = DistillationConfig(temp, 1.0)
        assert abs(tsnet_loss(s, t, y, cfg).item() - cross_entropy(s, y).item()) < 1e-10


def test_tsnet_alpha_zero_matched_logits():
    s = torch.randn(8, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    y = torch.zeros(8, dtype=torch.long)
    assert abs(tsnet_loss(s, s.clone(), y, DistillationConfig(5.0, 0.0)).item()) < 1e-10


@pytest.mark.parametrize("temp", [0.5, 1.0, 3.0, 7.0])
def test_softened_zero_logits_uniform(temp):
    assert torch.allclose(softened(torch.zeros(3, dtype=torch.float64), temp),
                          torch.full((3,), 1 / 3, dtype=torch.float64), atol=1e-15)


def test_t_squared_flag():
    g = torch.Generator().manual_seed(2)
    s, t = torch.randn(4, 3, generator=g), torch.randn(4, 3, generator=g)
    plain = distillation_loss(s, t, 5.0)
    assert distillation_loss(s, t, 5.0, t_squared=True).item() == pytest.approx(25 * plain.item())


def test_distillation_config_validation():
    with pytest.raises(ConfigError):
        DistillationConfig(0.0, 0.5)
    with pytest.raises(ConfigError):
        DistillationConfig(3.0, 1.5)


logit_triples = st.lists(st.floats(-20, 20, allow_nan=False), min_size=3, max_size=3)


@settings(max_examples=100, deadline=None)
@given(logit_triples, st.permutations(range(3)))
def test_softmax_permutation_equivariant(logits, perm):
    z = torch.tensor(logits, dtype=torch.float64)
    p = torch.tensor(perm)
    assert torch.allclose(torch.softmax(z[p], -1), torch.softmax(z, -1)[p], atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(logit_triples, logit_triples, st.sampled_from([1.0, 3.0, 5.0, 7.0]))
def test_distillation_nonnegative(s, t, temp):
    s = torch.tensor([s], dtype=torch.float64)
    t = torch.tensor([t], dtype=torch.float64)
    kl = distillation_loss(s, t, temp).item()
    assert kl >= -1e-12
    if torch.allclose(softened(s, temp), softened(t, temp), atol=1e-9):
        assert kl < 1e-9
    else:
        assert kl > 0


@settings(max_examples=50, deadline=None)
@given(logit_triples, logit_triples, st.integers(0, 2), st.floats(0, 1))
def test_tsnet_loss_interpolates(s, t, y, alpha):
    s = torch.tensor([s], dtype=torch.float64)
    t = torch.tensor([t], dtype=torch.float64)
    yy = torch.tensor([y])
    l_stu = cross_entropy(s, yy).item()
    l_dis = distillation_loss(s, t, 3.0).item()
    val = tsnet_loss(s, t, yy, DistillationConfig(3.0, alpha)).item()
    assert val == pytest.approx(alpha * l_stu + (1 - alpha) * l_dis, abs=1e-9)
    assert min(l_stu, l_dis) - 1e-9 <= val <= max(l_stu, l_dis) + 1e-9


def test_temperature_preserves_argmax():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        z = torch.from_numpy(rng.normal(0, 5, 3))
        assert softened(z, 1.0).argmax() == softened(z, 7.0).argmax()


def test_predict_contract(rng):
    m = build_1cnn(seed=0)
    clip = rng.random((5, 32, 32, 3)).astype(np.float32)
    p = predict(m, clip)
    assert p.shape == (3,) and np.all(np.isfinite(p)) and abs(p.sum() - 1) < 1e-6
    zeros = np.zeros((5, 32, 32, 3), np.float32)
    assert np.array_equal(predict(m, zeros), predict(m, zeros))
    with pytest.raises(InferenceError):
        predict(m, np.zeros((4, 32, 32, 3)))
    assert m.training  # predict restores the previous mode


def test_gradcheck_two_branch_loss():
    m = build_2cnn(seed=0).double().eval()
    x = batch().double()
    ym, yd = torch.tensor([0, 1, 2, 0]), torch.tensor([1, 1, 0, 2])

    def loss():
        a, b = m.forward_both(x)
        return two_branch_loss(a, b, ym, yd)

    r = sampled_gradcheck(loss, [list(m.mood_branch.named_parameters()),
                                 list(m.delta_branch.named_parameters())])
    assert r.max_rel_error() < 1e-3


def test_gradcheck_tsnet_loss():
    teacher = _teacher().double()
    m = build_tsnet(teacher, cfg=DistillationConfig(3.0, 0.3), seed=0).double().eval()
    x = batch().double()
    y = torch.tensor([0, 1, 2, 0])
    t_logits = m.teacher_logits(x)
    r = sampled_gradcheck(lambda: tsnet_loss(m(x), t_logits, y, m.cfg),
                          [list(m.student.named_parameters())])
    assert r.max_rel_error() < 1e-3
    assert all(not p.requires_grad for p in m.teacher.parameters())


@pytest.mark.parametrize("arch,attention", [("1cnn", "none"), ("1cnn", "pst"), ("2cnn", "sst"),
                                            ("2cnn_mlp", "temporal"), ("tsnet", "spatial")])
def test_checkpoint_round_trip(tmp_path, arch, attention):
    if arch == "1cnn":
        module = build_1cnn(attention=attention, literal_product=True, seed=0)
    elif arch == "2cnn":
        module = build_2cnn(attention=attention, seed=0)
    else:
        t = build_2cnn_mlp(trained(build_1cnn(attention=attention, seed=1)),
                           trained(build_1cnn(attention=attention, seed=2)))
        module = t if arch == "2cnn_mlp" else build_tsnet(
            trained(t), cfg=DistillationConfig(7.0, 0.05), attention=attention, seed=3)
    module.eval()
    tm = TrainedModel(arch, attention, module, {"seed": 4, "fold": 1,
                                                "hyperparameters": {"learning_rate": 1e-3}})
    save_checkpoint(tm, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    assert back.arch == arch and back.attention == attention
    assert parameter_checksum(back.module) == parameter_checksum(module)
    x = batch(2)
    assert torch.equal(back.module(x), module(x))
    import json
    sidecar = json.loads((tmp_path / "ck" / "model.json").read_text())
    assert sidecar["class_order"] == list(CLASS_ORDER)
    assert sidecar["seed"] == 4 and sidecar["attention"] == attention
