"""Network container checks: spec validation, initialization statistics,
forward semantics in both batch-norm forms, gradient helpers and checkpoint
round trips."""

import math
import os

import numpy as np
import pytest

import gradlab as gl
from gradlab import autodiff as ad
from gradlab import nn
from gradlab import objectives as obj


def rel(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    den = max(np.abs(a).max(), np.abs(b).max(), 1e-300)
    return float(np.abs(a - b).max() / den)


class TestSpecs:
    def test_mlp_shapes(self):
        spec = nn.mlp_spec(8, [32, 16], 5)
        assert spec.shapes() == [(32,), (32,), (16,), (16,), (5,)]
        assert spec.out_shape() == (5,)
        assert spec.in_degrees() == {0: 8, 2: 32, 4: 16}

    def test_conv_stack_shapes(self):
        spec = nn.NetworkSpec((3, 8, 8), (
            nn.LayerSpec.conv(4, kernel=3, padding=1),
            nn.LayerSpec.batchnorm(),
            nn.LayerSpec.relu(),
            nn.LayerSpec.avgpool(2),
            nn.LayerSpec.flatten(),
            nn.LayerSpec.dense(10),
        ))
        assert spec.shapes()[-3:] == [(4, 4, 4), (64,), (10,)]
        assert spec.in_degrees() == {0: 3 * 9, 5: 64}

    def test_dense_needs_flat_input(self):
        with pytest.raises(ValueError, match="layer 0 .*flatten"):
            nn.NetworkSpec((3, 4, 4), (nn.LayerSpec.dense(5),))

    def test_conv_needs_image_input(self):
        with pytest.raises(ValueError, match="layer 1 .*conv"):
            nn.NetworkSpec((3, 4, 4), (nn.LayerSpec.flatten(), nn.LayerSpec.conv(2)))

    def test_pool_divisibility_names_layer(self):
        with pytest.raises(ValueError, match="layer 0 .*mask"):
            nn.NetworkSpec((3, 5, 5), (nn.LayerSpec.avgpool(2),))

    def test_kernel_too_large_names_layer(self):
        with pytest.raises(ValueError, match="layer 0"):
            nn.NetworkSpec((3, 2, 2), (nn.LayerSpec.conv(4, kernel=5),))

    def test_dict_roundtrip(self):
        spec = nn.standard_archs("strided6", (3, 32, 32), channels=4)
        back = nn.NetworkSpec.from_dict(spec.to_dict())
        assert back == spec

    def test_unknown_layer_kind(self):
        with pytest.raises(ValueError, match="unknown layer kind"):
            nn.LayerSpec("dropout")


class TestInit:
    def test_he_weight_statistics(self):
        spec = nn.mlp_spec(64, [128], 10)
        net = nn.he_init(spec, seed=0)
        # hidden layer feeds a relu: gain 2; readout does not: gain 1
        for name, gain in (("0.weight", 2.0), ("2.weight", 1.0)):
            w = net.params[name]
            fan_in = w.shape[0]
            var = w.var()
            assert 0.8 * gain / fan_in < var < 1.2 * gain / fan_in, name
            assert abs(w.mean()) < 3.0 * math.sqrt(gain / fan_in / w.size)

    def test_biases_and_bn_identity(self):
        spec = nn.NetworkSpec((2, 4, 4), (
            nn.LayerSpec.conv(3), nn.LayerSpec.batchnorm(), nn.LayerSpec.relu(),
            nn.LayerSpec.flatten(), nn.LayerSpec.dense(2)))
        net = nn.he_init(spec, seed=1)
        assert np.all(net.params["0.bias"] == 0.0)
        assert np.all(net.params["1.gamma"] == 1.0)
        assert np.all(net.params["1.beta"] == 0.0)
        assert np.all(net.buffers["1.running_mean"] == 0.0)
        assert np.all(net.buffers["1.running_var"] == 1.0)

    def test_seed_pins_weights(self):
        spec = nn.mlp_spec(6, [8], 3)
        a = nn.he_init(spec, seed=7)
        b = nn.he_init(spec, seed=7)
        c = nn.he_init(spec, seed=8)
        assert np.array_equal(a.params["0.weight"], b.params["0.weight"])
        assert not np.array_equal(a.params["0.weight"], c.params["0.weight"])


class TestForward:
    def test_known_weights(self):
        w = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([0.5, -1.0])
        net = nn.Network(nn.mlp_spec(2, [], 2), {"0.weight": w, "0.bias": b}, {})
        z = net.logits_value(np.array([1.0, 1.0]))
        assert rel(z, [4.5, 5.0]) < 1e-15

    def test_batched_matches_per_sample(self):
        spec = nn.NetworkSpec((2, 4, 4), (
            nn.LayerSpec.conv(3, kernel=2, stride=2), nn.LayerSpec.batchnorm(),
            nn.LayerSpec.relu(), nn.LayerSpec.maxpool(2),
            nn.LayerSpec.flatten(), nn.LayerSpec.dense(4)))
        net = nn.he_init(spec, seed=2)
        rng = np.random.default_rng(3)
        xb = rng.normal(size=(5, 2, 4, 4))
        zb = net.logits_value(xb)
        for i in range(5):
            assert rel(zb[i], net.logits_value(xb[i])) < 1e-12

    def test_dense_equals_one_by_one_conv(self):
        rng = np.random.default_rng(4)
        w = rng.normal(size=(6, 3))
        b = rng.normal(size=3)
        dense = nn.Network(nn.mlp_spec(6, [], 3), {"0.weight": w, "0.bias": b}, {})
        conv = nn.Network(
            nn.NetworkSpec((6, 1, 1), (nn.LayerSpec.conv(3, kernel=1),
                                       nn.LayerSpec.flatten(), nn.LayerSpec.dense(3))),
            {"0.weight": w.T.reshape(3, 6, 1, 1), "0.bias": b,
             "2.weight": np.eye(3), "2.bias": np.zeros(3)}, {})
        x = rng.normal(size=6)
        assert rel(dense.logits_value(x), conv.logits_value(x.reshape(6, 1, 1))) < 1e-12

    def test_positive_homogeneity_without_biases(self):
        # with zero biases the whole relu net is positively homogeneous of
        # degree one in its input; scaling the weights of all three affine
        # layers instead multiplies logits by the cube
        spec = nn.mlp_spec(5, [9, 9], 3)
        net = nn.he_init(spec, seed=5)
        for name in list(net.params):
            if name.endswith("bias"):
                net.params[name][:] = 0.0
        rng = np.random.default_rng(6)
        x = rng.normal(size=5)
        a = 2.5
        assert rel(net.logits_value(a * x), a * net.logits_value(x)) < 1e-12
        scaled = net.clone()
        for name in list(scaled.params):
            if name.endswith("weight"):
                scaled.params[name][:] *= a
        assert rel(scaled.logits_value(x), a ** 3 * net.logits_value(x)) < 1e-12

    def test_input_shape_mismatch(self):
        net = nn.he_init(nn.mlp_spec(4, [], 2), seed=0)
        tape = ad.Tape()
        with pytest.raises(ValueError, match="does not match spec input"):
            net.forward_graph(tape, tape.const(np.ones((2, 5))))

    def test_predict_breaks_ties_low(self):
        net = nn.Network(nn.mlp_spec(2, [], 3),
                         {"0.weight": np.zeros((2, 3)),
                          "0.bias": np.array([1.0, 1.0, 0.0])}, {})
        assert int(net.predict(np.ones(2))) == 0


class TestBatchnorm:
    def make(self):
        spec = nn.NetworkSpec((3,), (nn.LayerSpec.batchnorm(),
                                     nn.LayerSpec.dense(2)))
        net = nn.he_init(spec, seed=7)
        net.params["0.gamma"][:] = [1.0, 2.0, 0.5]
        net.params["0.beta"][:] = [0.1, -0.2, 0.0]
        net.buffers["0.running_mean"][:] = [0.5, -1.0, 2.0]
        net.buffers["0.running_var"][:] = [1.0, 4.0, 0.25]
        return net

    def test_inference_affine(self):
        net = self.make()
        rng = np.random.default_rng(8)
        x = rng.normal(size=(4, 3))
        tape = ad.Tape()
        z = net.forward_graph(tape, tape.const(x), train=False)
        gam, bet = net.params["0.gamma"], net.params["0.beta"]
        rm, rv = net.buffers["0.running_mean"], net.buffers["0.running_var"]
        xhat = (x - rm) / np.sqrt(rv + nn.BN_EPS) * gam + bet
        want = xhat @ net.params["1.weight"] + net.params["1.bias"]
        assert rel(np.asarray(z.tensor), want) < 1e-12

    def test_train_uses_batch_statistics(self):
        net = self.make()
        rng = np.random.default_rng(9)
        x = rng.normal(size=(16, 3)) * 3.0 + 1.0
        tape = ad.Tape()
        z = net.forward_graph(tape, tape.const(x), train=True)
        mu = x.mean(axis=0)
        var = x.var(axis=0)  # biased
        xhat = (x - mu) / np.sqrt(var + nn.BN_EPS) * net.params["0.gamma"] + net.params["0.beta"]
        want = xhat @ net.params["1.weight"] + net.params["1.bias"]
        assert rel(np.asarray(z.tensor), want) < 1e-10
        tape2 = ad.Tape()
        z2 = net.forward_graph(tape2, tape2.const(x), train=False)
        assert rel(np.asarray(z.tensor), np.asarray(z2.tensor)) > 1e-3

    def test_update_stats_momentum(self):
        net = self.make()
        rng = np.random.default_rng(10)
        x = rng.normal(size=(16, 3))
        rm0 = net.buffers["0.running_mean"].copy()
        rv0 = net.buffers["0.running_var"].copy()
        tape = ad.Tape()
        net.forward_graph(tape, tape.const(x), train=True, update_stats=True)
        m = nn.BN_MOMENTUM
        assert rel(net.buffers["0.running_mean"],
                   (1 - m) * rm0 + m * x.mean(axis=0)) < 1e-12
        assert rel(net.buffers["0.running_var"],
                   (1 - m) * rv0 + m * x.var(axis=0)) < 1e-12

    def test_no_update_without_flag(self):
        net = self.make()
        rng = np.random.default_rng(11)
        x = rng.normal(size=(8, 3))
        rm0 = net.buffers["0.running_mean"].copy()
        tape = ad.Tape()
        net.forward_graph(tape, tape.const(x), train=True)
        assert np.array_equal(net.buffers["0.running_mean"], rm0)

    def test_conv_form_normalizes_per_channel(self):
        spec = nn.NetworkSpec((2, 4, 4), (nn.LayerSpec.batchnorm(),
                                          nn.LayerSpec.flatten(),
                                          nn.LayerSpec.dense(2)))
        net = nn.he_init(spec, seed=12)
        rng = np.random.default_rng(13)
        x = rng.normal(size=(6, 2, 4, 4)) * 2.0 - 1.0
        tape = ad.Tape()
        params = net.lift_params(tape)
        xn = tape.const(x)
        # reach inside: normalized activations should have zero mean and
        # unit variance per channel over (batch, h, w)
        bn_out = net._batchnorm(tape, xn, 0, params["0.gamma"], params["0.beta"],
                                train=True, update_stats=False)
        y = np.asarray(bn_out.tensor)
        assert np.abs(y.mean(axis=(0, 2, 3))).max() < 1e-12
        assert rel(y.var(axis=(0, 2, 3)), np.ones(2)) < 1e-3


class TestGradientHelpers:
    def test_chain_rule_assembly(self):
        # dL/dx must equal sum_k (softmax_k - onehot_k) * dz_k/dx
        net = nn.he_init(nn.mlp_spec(6, [12, 12], 4), seed=14)
        rng = np.random.default_rng(15)
        x = gl.Tensor(rng.normal(size=6))
        c = 2
        g = np.asarray(nn.input_gradient(net, x, c))
        z = net.logits_value(x)
        coeff = np.asarray(obj.cross_entropy_logit_grad(z, c))
        per_logit = np.asarray(nn.logit_input_gradients(net, x))
        assert rel(g, coeff @ per_logit) < 1e-10

    def test_logit_gradients_of_linear_net(self):
        rng = np.random.default_rng(16)
        w = rng.normal(size=(5, 3))
        net = nn.Network(nn.mlp_spec(5, [], 3),
                         {"0.weight": w, "0.bias": np.zeros(3)}, {})
        g = np.asarray(nn.logit_input_gradients(net, gl.Tensor(np.ones(5))))
        assert rel(g, w.T) < 1e-14

    def test_batched_logit_gradients(self):
        net = nn.he_init(nn.mlp_spec(4, [8], 3), seed=17)
        rng = np.random.default_rng(18)
        xb = rng.normal(size=(3, 4))
        g = np.asarray(nn.logit_input_gradients(net, gl.Tensor(xb)))
        assert g.shape == (3, 3, 4)
        for i in range(3):
            gi = np.asarray(nn.logit_input_gradients(net, gl.Tensor(xb[i])))
            assert rel(g[i], gi) < 1e-12

    def test_relu_activity_near_half_at_init(self):
        net = nn.he_init(nn.mlp_spec(128, [256], 10), seed=19)
        rng = np.random.default_rng(20)
        x = rng.normal(size=(64, 128))
        act = nn.relu_activity(net, gl.Tensor(x))
        assert len(act) == 1
        assert 0.45 < act[0] < 0.55


class TestStandardArchs:
    @pytest.mark.parametrize("name", ["strided6", "pool6-avg", "pool6-max",
                                      "pool6-stride"])
    def test_six_block_families(self, name):
        spec = nn.standard_archs(name, (3, 32, 32), channels=4, classes=7)
        assert spec.out_shape() == (7,)
        assert sum(1 for l in spec.layers if l.kind == "conv") == 6

    @pytest.mark.parametrize("h", [32, 64])
    def test_dilated_family_tracks_size(self, h):
        spec = nn.standard_archs("dilated8", (3, h, h), channels=2)
        assert spec.out_shape() == (10,)
        convs = [l for l in spec.layers if l.kind == "conv"]
        assert len(convs) == 8
        # Block 1 stays at dilation 1 so pixel-duplicated inputs decohere
        # before the first pool; the rest track the image size.
        assert convs[0].dilation == (1, 1)
        for conv in convs[1:]:
            assert conv.dilation == (max(1, h // 32),) * 2
            assert conv.padding == conv.dilation

    def test_unknown_name_lists_options(self):
        with pytest.raises(ValueError, match="strided6"):
            nn.standard_archs("resnet50", (3, 32, 32))


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        spec = nn.NetworkSpec((2, 4, 4), (
            nn.LayerSpec.conv(3, kernel=2, stride=2), nn.LayerSpec.batchnorm(),
            nn.LayerSpec.relu(), nn.LayerSpec.flatten(), nn.LayerSpec.dense(4)))
        net = nn.he_init(spec, seed=21)
        net.buffers["1.running_mean"][:] = [0.25, -0.5, 1.0 / 3.0]
        net.meta["epoch"] = 9
        path = os.path.join(tmp_path, "net.ckpt")
        net.save(path)
        back = nn.Network.load(path)
        assert back.spec == net.spec
        assert back.meta == net.meta
        for k in net.params:
            assert np.array_equal(back.params[k], net.params[k]), k
        for k in net.buffers:
            assert np.array_equal(back.buffers[k], net.buffers[k]), k

    def test_bad_magic(self, tmp_path):
        path = os.path.join(tmp_path, "junk.ckpt")
        with open(path, "wb") as f:
            f.write(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError, match="bad magic"):
            nn.Network.load(path)

    def test_version_check(self, tmp_path):
        spec = nn.mlp_spec(3, [], 2)
        net = nn.he_init(spec, seed=22)
        path = os.path.join(tmp_path, "net.ckpt")
        net.save(path)
        raw = bytearray(open(path, "rb").read())
        raw[4] = 99
        open(path, "wb").write(bytes(raw))
        with pytest.raises(ValueError, match="version"):
            nn.Network.load(path)

    def test_param_shape_validation(self):
        spec = nn.mlp_spec(3, [], 2)
        with pytest.raises(ValueError, match="0.weight"):
            nn.Network(spec, {"0.weight": np.zeros((2, 2)), "0.bias": np.zeros(2)}, {})
        with pytest.raises(ValueError, match="names"):
            nn.Network(spec, {"0.weight": np.zeros((3, 2))}, {})
