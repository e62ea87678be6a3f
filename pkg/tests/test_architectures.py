import numpy as np
import pytest

from horizon_forge import tensor as T
from horizon_forge.architectures import (ARCH_IDS, GateParams, ModelSpec, attention_gate, build_model, cfa_gate,
                                         forward, load_weights, nested_skip_node, node_count, save_weights,
                                         sobel_features)
from horizon_forge.tensor import ShapeError, Tensor, finite_diff_check

DESK = {a: (4 if a == "unet_compressed" else 8) for a in ARCH_IDS}


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def gate_params(rng, enc_c=4, g_c=8, inter=2, mode=None, scale=0.5):
    def pair(o, i, k=1, s=scale):
        return leaf(rng.standard_normal((o, i, k, k)) * s), leaf(rng.standard_normal(o) * 0.1)

    sp = pair(inter, enc_c, 3) if mode in ("spatial_only", "full") else None
    # Sobel responses run up to 8x the input, so the edge head gets a matching smaller scale;
    # otherwise finite differences keep stepping across ReLU kinks
    ed = pair(inter, 2 * enc_c, s=scale / 8) if mode == "full" else None
    return GateParams(pair(inter, enc_c), pair(inter, g_c), pair(1, inter), sp, ed)


def gate_inputs(rng, n=2, enc_c=4, g_c=8, size=8):
    return leaf(rng.standard_normal((n, enc_c, size, size))), leaf(rng.standard_normal((n, g_c, size // 2, size // 2)))


# ---------------------------------------------------------------- specs

def test_spec_defaults_and_validation():
    assert ModelSpec("unet").base_channels == 64
    assert ModelSpec("unet_compressed").base_channels == 16
    assert ModelSpec("unet").channels == [64, 128, 256, 512, 1024]
    for bad in (dict(arch_id="vnet"), dict(arch_id="unet", levels=3), dict(arch_id="unet", base_channels=2),
                dict(arch_id="unet", input_shape=(100, 128, 1))):
        with pytest.raises(ValueError):
            ModelSpec(**bad)


# ---------------------------------------------------------------- gates

def test_attention_gate_zero_psi_gives_half(rng):
    x, g = gate_inputs(rng)
    gp = gate_params(rng)
    gp.psi[0].data[:] = 0.0
    gp.psi[1].data[:] = 0.0
    out, alpha = attention_gate(x, g, gp)
    assert alpha.shape == (2, 1, 8, 8)
    np.testing.assert_allclose(alpha.data, 0.5)
    np.testing.assert_allclose(out.data, 0.5 * x.data)


def test_attention_gate_saturation(rng):
    x, g = gate_inputs(rng)
    gp = gate_params(rng)
    gp.psi[0].data[:] = 0.0
    gp.psi[1].data[:] = 50.0
    out, alpha = attention_gate(x, g, gp)
    np.testing.assert_allclose(out.data, x.data, rtol=1e-12)
    gp.psi[1].data[:] = -50.0
    out, _ = attention_gate(x, g, gp)
    assert np.abs(out.data).max() < 1e-20


def test_gate_extent_mismatch(rng):
    x = Tensor(rng.standard_normal((1, 4, 8, 8)))
    g = Tensor(rng.standard_normal((1, 8, 8, 8)))
    with pytest.raises(ShapeError):
        attention_gate(x, g, gate_params(rng))


def test_cfa_reduces_to_attention(rng):
    for _ in range(20):
        x, g = gate_inputs(rng)
        gp = gate_params(rng, mode="full")
        for t in (*gp.theta_spatial, *gp.theta_edge):
            t.data[:] = 0.0
        _, a_ref = attention_gate(x, g, gp)
        for mode in ("spatial_only", "full"):
            _, a = cfa_gate(x, g, gp, mode)
            np.testing.assert_allclose(a.data, a_ref.data, atol=1e-6)


def test_cfa_mode_validation(rng):
    x, g = gate_inputs(rng)
    with pytest.raises(ValueError):
        cfa_gate(x, g, gate_params(rng, mode="full"), "edges")


def test_sobel_features_ramp():
    ramp = np.tile(np.arange(9.0), (9, 1))[None, None]
    out = sobel_features(Tensor(ramp)).data
    assert np.all(out[0, 0, 1:-1, 1:-1] == 8.0) and np.all(out[0, 1, 1:-1, 1:-1] == 0.0)


@pytest.mark.parametrize("mode", [None, "spatial_only", "full"])
def test_gate_gradients(rng, mode):
    x, g = gate_inputs(rng)
    gp = gate_params(rng, mode=mode)
    probe = rng.standard_normal((2, 4, 8, 8))
    params = [t for pair in (gp.theta_x, gp.theta_g, gp.psi, gp.theta_spatial, gp.theta_edge) if pair for t in pair]

    def f():
        out, _ = attention_gate(x, g, gp) if mode is None else cfa_gate(x, g, gp, mode)
        return T.weighted_sum(out, probe)

    assert finite_diff_check(f, [x, g] + params) < 1e-3


# ---------------------------------------------------------------- nested skip nodes

def test_nested_node_shapes(rng):
    w = build_model(ModelSpec("unetpp", base_channels=4), 0)
    s = w.scope("node0_2")
    same = [Tensor(rng.standard_normal((1, 4, 16, 16)).astype(np.float32)) for _ in range(2)]
    below = Tensor(rng.standard_normal((1, 8, 8, 8)).astype(np.float32))
    out = nested_skip_node(same, below, s)
    assert out.shape == (1, 4, 16, 16)
    with pytest.raises(ValueError):
        nested_skip_node([], below, s)
    with pytest.raises(ShapeError):
        nested_skip_node(same[:1], below, s)


def test_unetpp_has_ten_nodes():
    assert node_count(build_model(ModelSpec("unetpp", base_channels=4), 0)) == 10
    assert node_count(build_model(ModelSpec("unet", base_channels=4), 0)) == 0


# ---------------------------------------------------------------- whole models

def test_parameter_ordering_and_counts():
    counts = {a: build_model(ModelSpec(a, base_channels=8), 0).param_count() for a in ARCH_IDS if a != "unet_compressed"}
    assert counts["unet"] < counts["attn_unet"] < counts["cfa_s_unet"] < counts["cfa_unet"]
    assert counts["unet"] < counts["unetpp"]
    assert build_model(ModelSpec("unet_compressed"), 0).param_count() < counts["unet"] * 8


def test_full_width_unet_size():
    # 64-channel U-Net with 2x2 transposed convs: about 31 million parameters
    n = build_model(ModelSpec("unet"), 0).param_count()
    assert 30.5e6 < n < 31.5e6


@pytest.mark.parametrize("arch", ARCH_IDS)
def test_forward_range_shape_and_determinism(rng, arch):
    spec = ModelSpec(arch, base_channels=DESK[arch])
    w = build_model(spec, 3)
    x = rng.standard_normal((2, 1, 128, 128)).astype(np.float32)
    alphas = []
    y = forward(w, x, alphas=alphas)
    assert y.shape == (2, 1, 128, 128)
    assert np.all((y.data >= 0) & (y.data <= 1))
    np.testing.assert_array_equal(forward(build_model(spec, 3), x).data, y.data)
    assert len(alphas) == (4 if arch in ("attn_unet", "cfa_s_unet", "cfa_unet") else 0)
    with pytest.raises(ShapeError):
        forward(w, x[:, :, :64])


def test_train_forward_needs_rng(rng):
    w = build_model(ModelSpec("unet", base_channels=4), 0)
    with pytest.raises(ValueError):
        forward(w, np.zeros((1, 1, 128, 128), np.float32), train=True)


def test_seeds_differ():
    a = build_model(ModelSpec("unet", base_channels=4), 0)
    b = build_model(ModelSpec("unet", base_channels=4), 1)
    assert not np.array_equal(a["enc0.conv1.kernel"].data, b["enc0.conv1.kernel"].data)


@pytest.mark.parametrize("arch", ARCH_IDS)
def test_weights_roundtrip_bit_exact(tmp_path, arch):
    w = build_model(ModelSpec(arch, base_channels=4), 7)
    w["head.bias"].data[:] = 0.123
    save_weights(w, tmp_path / "w.bin")
    back = load_weights(tmp_path / "w.bin")
    assert back.spec == w.spec and back.seed == 7
    assert list(back) == list(w)
    for k in w:
        assert back[k].data.tobytes() == w[k].data.tobytes()
        assert back[k].requires_grad == w[k].requires_grad


def test_weights_corruption(tmp_path):
    w = build_model(ModelSpec("unet", base_channels=4), 0)
    save_weights(w, tmp_path / "w.bin")
    raw = (tmp_path / "w.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:-10])
    with pytest.raises(ValueError):
        load_weights(tmp_path / "t.bin")
    (tmp_path / "x.bin").write_bytes(raw + b"\0")
    with pytest.raises(ValueError):
        load_weights(tmp_path / "x.bin")
    (tmp_path / "m.bin").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ValueError):
        load_weights(tmp_path / "m.bin")


def test_whole_model_gradient_small(rng):
    # end-to-end finite differences on a tiny float64 gated U-Net, BN in train mode, no dropout.
    # Conv biases feeding batch norm have an exactly zero gradient, so they are left out. A deep
    # net is full of ReLU and max-pool kinks, hence the small step.
    spec = ModelSpec("attn_unet", base_channels=4, input_shape=(32, 32, 1), dropout=0.0)
    w = build_model(spec, 0).astype(np.float64)
    x = rng.standard_normal((2, 1, 32, 32))
    probe = rng.standard_normal((2, 1, 32, 32))
    names = ["enc0.conv1.kernel", "enc1.bn2.gamma", "gate1.psi.kernel", "dec0.up.kernel", "head.kernel", "head.bias"]

    def f():
        return T.weighted_sum(forward(w, x, train=True, rng=np.random.default_rng(0)), probe)

    assert finite_diff_check(f, [w[k] for k in names], eps=1e-6, max_coords=10) < 1e-3
