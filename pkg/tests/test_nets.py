"""Architecture construction, attention gating, checkpoints, counts."""

import numpy as np
import pytest

from cartiseg import metrics, nets
from cartiseg import tensor as T
from cartiseg import train as TR


def small_config(**kw):
    base = dict(depth=3, base_channels=4, attention=False,
                dropout_p=0.0, noise_level=0.0, input_size=16)
    base.update(kw)
    return nets.ModelConfig(**base)


def test_variant_table_stage_and_gate_counts():
    for name, (depth, attention) in nets.VARIANTS.items():
        cfg = nets.ModelConfig(depth=depth, base_channels=4, attention=attention,
                               input_size=16)
        model = nets.build_model(cfg, np.random.default_rng(0))
        assert len(model.encoders) == depth, name
        assert len(model.decoders) == depth, name
        assert len(model.gates) == (depth if attention else 0), name
    assert set(nets.VARIANTS) == {"unet", "attn-unet", "trunc-unet", "trunc-attn-unet"}


def test_same_seed_builds_identical_parameters():
    a = nets.build_model(small_config(attention=True), np.random.default_rng(99))
    b = nets.build_model(small_config(attention=True), np.random.default_rng(99))
    names_a = dict(a.named_parameters())
    names_b = dict(b.named_parameters())
    assert names_a.keys() == names_b.keys()
    for k in names_a:
        assert np.array_equal(names_a[k].data, names_b[k].data), k


def test_config_validation_errors():
    with pytest.raises(ValueError):
        small_config(depth=5)
    with pytest.raises(ValueError):
        small_config(depth=2)
    with pytest.raises(ValueError):
        nets.ModelConfig(depth=4, input_size=60)   # 60 % 16 != 0
    with pytest.raises(ValueError):
        small_config(dropout_p=1.0)
    with pytest.raises(ValueError):
        small_config(dropout_p=-0.1)
    with pytest.raises(ValueError):
        small_config(noise_level=0.6)
    with pytest.raises(ValueError):
        small_config(base_channels=1)


def test_forward_shape_range_and_determinism():
    model = nets.build_model(small_config(attention=True), np.random.default_rng(1))
    x = np.random.default_rng(2).normal(size=(2, 1, 16, 16)).astype(np.float32)
    out1 = model(x).data
    out2 = model(x).data
    assert out1.shape == (2, 1, 16, 16)
    assert np.all((out1 > 0) & (out1 < 1))
    assert np.array_equal(out1, out2)


def test_forward_rejects_wrong_spatial_size_and_shape():
    model = nets.build_model(small_config(), np.random.default_rng(1))
    with pytest.raises(ValueError):
        model(np.zeros((1, 1, 32, 32), dtype=np.float32))
    with pytest.raises(ValueError):
        model(np.zeros((1, 2, 16, 16), dtype=np.float32))
    with pytest.raises(ValueError):
        model(np.zeros((16, 16), dtype=np.float32))
    with pytest.raises(ValueError):
        model(np.zeros((1, 1, 16, 16), dtype=np.float32), training=True)  # rng missing


def test_spatial_symmetry_across_variants_and_sizes():
    rng = np.random.default_rng(3)
    for depth, attention in nets.VARIANTS.values():
        for size in (16, 32):
            cfg = nets.ModelConfig(depth=depth, base_channels=2, attention=attention,
                                   input_size=size)
            model = nets.build_model(cfg, np.random.default_rng(0))
            x = rng.normal(size=(1, 1, size, size)).astype(np.float32)
            assert model(x).shape == (1, 1, size, size)


# ---------------------------------------------------------------------------
# attention gate


def make_gate_inputs(seed=0, n=1, f=8, h=16):
    rng = np.random.default_rng(seed)
    x = T.Tensor(rng.normal(size=(n, f, h, h)).astype(np.float32))
    g = T.Tensor(rng.normal(size=(n, 2 * f, h // 2, h // 2)).astype(np.float32))
    return x, g


def test_gate_saturated_open_passes_skip_through():
    gate = nets.AttentionGate(np.random.default_rng(0), 8, np.float32)
    x, g = make_gate_inputs()
    gate.psi.bias.data[:] = 20.0
    out = gate(x, g).data
    assert np.max(np.abs(out - x.data)) < 1e-6


def test_gate_saturated_closed_blocks_skip():
    gate = nets.AttentionGate(np.random.default_rng(0), 8, np.float32)
    x, g = make_gate_inputs()
    gate.psi.bias.data[:] = -20.0
    out = gate(x, g).data
    assert np.max(np.abs(out)) < 1e-5


def test_gate_shapes_and_alpha_map():
    gate = nets.AttentionGate(np.random.default_rng(4), 8, np.float32)
    x, g = make_gate_inputs(seed=5)
    assert gate(x, g).shape == (1, 8, 16, 16)
    alpha = gate.alpha_map(x, g)
    assert alpha.shape == (1, 1, 16, 16)
    assert np.all((alpha > 0) & (alpha < 1))


def test_gate_alpha_strictly_inside_unit_interval_property():
    # strict (0,1) at feature magnitudes the sigmoid resolves in float32;
    # at absurd scales the rounding collapses to the closed interval
    rng = np.random.default_rng(6)
    gate = nets.AttentionGate(np.random.default_rng(7), 4, np.float32)
    for trial in range(20):
        scale = float(rng.choice([0.01, 0.3, 1.0, 3.0]))
        x = T.Tensor((rng.normal(size=(1, 4, 8, 8)) * scale).astype(np.float32))
        g = T.Tensor((rng.normal(size=(1, 8, 4, 4)) * scale).astype(np.float32))
        alpha = gate.alpha_map(x, g)
        assert np.all(alpha > 0) and np.all(alpha < 1), trial
    x = T.Tensor((rng.normal(size=(1, 4, 8, 8)) * 100).astype(np.float32))
    g = T.Tensor((rng.normal(size=(1, 8, 4, 4)) * 100).astype(np.float32))
    alpha = gate.alpha_map(x, g)
    assert np.all(alpha >= 0) and np.all(alpha <= 1)


def test_gate_rejects_misaligned_inputs():
    gate = nets.AttentionGate(np.random.default_rng(0), 8, np.float32)
    x, g = make_gate_inputs()
    with pytest.raises(ValueError):
        gate(x, T.Tensor(np.zeros((1, 16, 16, 16), dtype=np.float32)))  # wrong extent
    with pytest.raises(ValueError):
        gate(x, T.Tensor(np.zeros((1, 8, 8, 8), dtype=np.float32)))     # wrong channels
    with pytest.raises(ValueError):
        gate(T.Tensor(np.zeros((1, 4, 16, 16), dtype=np.float32)), g)   # gate built for 8


def test_gate_bypass_equivalence_with_plain_network():
    """alpha forced to 1 must reduce the gated network to the plain one."""
    attn = nets.build_model(small_config(attention=True), np.random.default_rng(11))
    plain = nets.build_model(small_config(attention=False), np.random.default_rng(12))
    attn_params = dict(attn.named_parameters())
    for name, p in plain.named_parameters():
        p.data = attn_params[name].data.copy()
    for gate in attn.gates:
        gate.force_alpha = 1.0
    x = np.random.default_rng(13).normal(size=(2, 1, 16, 16)).astype(np.float32)
    assert np.array_equal(attn(x).data, plain(x).data)


# ---------------------------------------------------------------------------
# parameter counts


def test_parameter_count_first_conv_hand_value():
    # 3x3 conv taking the single input channel to 8 output channels: 8*1*9+8
    model = nets.build_model(small_config(base_channels=8), np.random.default_rng(0))
    named = dict(model.named_parameters())
    assert named["enc0.conv1.weight"].data.size + named["enc0.conv1.bias"].data.size == 80
    assert parameter_sum(model) == nets.parameter_count(model)


def parameter_sum(model):
    return sum(p.data.size for p in model.parameters())


def test_full_to_truncated_ratio_in_band():
    full = nets.build_model(nets.ModelConfig(depth=4, base_channels=64, input_size=16),
                            np.random.default_rng(0))
    trunc = nets.build_model(nets.ModelConfig(depth=3, base_channels=64, input_size=16),
                             np.random.default_rng(0))
    ratio = nets.parameter_count(full) / nets.parameter_count(trunc)
    assert 3.0 <= ratio <= 5.0, ratio


def test_attention_overhead_below_five_percent():
    for depth in (3, 4):
        plain = nets.build_model(
            nets.ModelConfig(depth=depth, base_channels=8, input_size=16),
            np.random.default_rng(0))
        gated = nets.build_model(
            nets.ModelConfig(depth=depth, base_channels=8, attention=True, input_size=16),
            np.random.default_rng(0))
        overhead = (nets.parameter_count(gated) - nets.parameter_count(plain)) \
            / nets.parameter_count(plain)
        assert 0 < overhead < 0.05, (depth, overhead)


# ---------------------------------------------------------------------------
# binarize


def test_binarize_thresholds():
    assert nets.binarize(np.full((2, 2), 0.4)).sum() == 0
    assert nets.binarize(np.full((2, 2), 0.6)).sum() == 4
    assert nets.binarize(np.full((2, 2), 0.5)).sum() == 0      # strict inequality
    out = nets.binarize(T.Tensor(np.array([0.2, 0.8])))
    assert out.dtype == np.uint8 and out.tolist() == [0, 1]


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    cfg = small_config(attention=True, dropout_p=0.2, noise_level=0.35)
    model = nets.build_model(cfg, np.random.default_rng(21))
    for i, bn in enumerate(model.batchnorms()):
        bn.running_mean = bn.running_mean + np.float32(0.25 * (i + 1))
        bn.running_var = bn.running_var * np.float32(1.5)
    path = tmp_path / "model.wcsm"
    nets.save_checkpoint(model, path)
    loaded = nets.load_checkpoint(path)
    assert loaded.config == cfg
    orig = dict(model.named_parameters())
    for name, p in loaded.named_parameters():
        assert np.array_equal(p.data, orig[name].data), name
    for bn_l, bn_o in zip(loaded.batchnorms(), model.batchnorms()):
        assert np.array_equal(bn_l.running_mean, bn_o.running_mean)
        assert np.array_equal(bn_l.running_var, bn_o.running_var)
    path2 = tmp_path / "model2.wcsm"
    nets.save_checkpoint(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_roundtrip_preserves_inference(tmp_path):
    model = nets.build_model(small_config(attention=True), np.random.default_rng(22))
    path = tmp_path / "model.wcsm"
    nets.save_checkpoint(model, path)
    loaded = nets.load_checkpoint(path)
    x = np.random.default_rng(23).normal(size=(1, 1, 16, 16)).astype(np.float32)
    assert np.array_equal(model(x).data, loaded(x).data)


def test_checkpoint_corruption_detected(tmp_path):
    model = nets.build_model(small_config(), np.random.default_rng(0))
    path = tmp_path / "model.wcsm"
    nets.save_checkpoint(model, path)
    blob = path.read_bytes()

    bad = tmp_path / "bad.wcsm"
    bad.write_bytes(b"NOPE!" + blob[5:])
    with pytest.raises(nets.CheckpointError):
        nets.load_checkpoint(bad)
    bad.write_bytes(blob[:5] + bytes([9]) + blob[6:])
    with pytest.raises(nets.CheckpointError):
        nets.load_checkpoint(bad)
    bad.write_bytes(blob[:3])
    with pytest.raises(nets.CheckpointError):
        nets.load_checkpoint(bad)
    bad.write_bytes(blob[:-10])
    with pytest.raises(nets.CheckpointError):
        nets.load_checkpoint(bad)
    bad.write_bytes(blob + b"\x00\x00\x00\x00")
    with pytest.raises(nets.CheckpointError):
        nets.load_checkpoint(bad)


# ---------------------------------------------------------------------------
# end-to-end sanity


def test_tiny_model_overfits_single_pair():
    cfg = nets.ModelConfig(depth=3, base_channels=4, input_size=32)
    model = nets.build_model(cfg, np.random.default_rng(31))
    rng = np.random.default_rng(32)
    yy, xx = np.mgrid[:32, :32]
    mask = (((yy - 16) ** 2 + (xx - 14) ** 2) < 49).astype(np.float32)
    img = (mask * 0.6 + rng.normal(scale=0.05, size=(32, 32))).astype(np.float32)
    x = img[None, None]
    target = mask[None, None]
    params = model.parameters()
    state = TR.AdamState(params)
    for _ in range(200):
        model.zero_grad()
        loss = T.bce_loss(model.forward(x, training=True, rng=rng), T.Tensor(target))
        T.backward(loss)
        TR.adam_step(params, [p.grad for p in params], state, 3e-3)
    pred = nets.binarize(model(x).data[0, 0])
    assert metrics.dsc_2d(pred, mask.astype(np.uint8)) >= 0.99


def test_gradients_pass_fd_spot_check():
    """Random-parameter finite differences on a double-precision model."""
    cfg = small_config(attention=True)
    model = nets.build_model(cfg, np.random.default_rng(41), dtype=np.float64)
    rng = np.random.default_rng(42)
    x = rng.normal(size=(2, 1, 16, 16))
    target = (rng.random((2, 1, 16, 16)) > 0.7).astype(np.float64)
    dummy = np.random.default_rng(0)   # dropout 0 / noise 0: rng is unused

    def loss_value() -> float:
        with T.no_grad():
            return T.bce_loss(model.forward(x, training=True, rng=dummy),
                              T.Tensor(target)).item()

    model.zero_grad()
    loss = T.bce_loss(model.forward(x, training=True, rng=dummy), T.Tensor(target))
    T.backward(loss)
    named = list(model.named_parameters())
    h = 1e-5
    for k in rng.choice(len(named), size=5, replace=False):
        name, p = named[k]
        idx = tuple(rng.integers(0, s) for s in p.data.shape)
        keep = p.data[idx]
        p.data[idx] = keep + h
        up = loss_value()
        p.data[idx] = keep - h
        down = loss_value()
        p.data[idx] = keep
        fd = (up - down) / (2 * h)
        an = p.grad[idx]
        denom = max(abs(fd), abs(an), 1e-8)
        assert abs(fd - an) / denom < 1e-3, (name, idx, fd, an)
