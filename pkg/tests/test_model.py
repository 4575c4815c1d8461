import json

import numpy as np
import pytest

from builders import F64, chain_graph, random_bn, random_septcn, random_sgcn, tiny_model
from oracles import batchnorm_train_loop, graph_conv_loop, sep_tcn_block_loop, sgcn_block_loop, spatial_max_loop
from sdfa import nn
from sdfa.errors import CheckpointError, ConfigError, ShapeError
from sdfa.graph import build_graph
from sdfa.model import (ModelConfig, SgcnBlock, build_model, count_flops, count_params, forward, fuse_streams,
                        load_checkpoint, predict_proba, save_checkpoint, sep_tcn_block, sgcn_block)
from sdfa.nn import Param, Tensor


@pytest.fixture(scope="module")
def default_model():
    return build_model(ModelConfig(), seed=0)


class TestSgcnBlock:
    @pytest.mark.parametrize("ci, co", [(2, 2), (2, 3)])
    def test_eval_matches_loop(self, ci, co):
        rng = np.random.default_rng(ci * 10 + co)
        x = rng.normal(size=(1, ci, 2, 3))
        g = chain_graph(3)
        block = random_sgcn(rng, ci, co, 3)
        out = sgcn_block(Tensor(x), block, g, training=False).data
        expected = sgcn_block_loop(x, block.W.data, g.A_hat, block.M.data, block.bn.gamma.data, block.bn.beta.data,
                                   block.bn.running_mean, block.bn.running_var, block.bn.eps,
                                   None if block.proj_W is None else block.proj_W.data,
                                   None if block.proj_b is None else block.proj_b.data)
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_training_uses_batch_statistics(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 4, 5))
        g = chain_graph(5)
        block = random_sgcn(rng, 3, 4, 5)
        out = sgcn_block(Tensor(x), block, g, training=True).data
        h = graph_conv_loop(x, block.W.data, g.A_hat, block.M.data)
        normed = batchnorm_train_loop(h, block.bn.gamma.data, block.bn.beta.data, block.bn.eps)
        pooled = spatial_max_loop(nn.conv1x1(Tensor(x), block.proj_W, block.proj_b).data)
        np.testing.assert_allclose(out, np.maximum(normed + pooled, 0), atol=1e-10)

    def test_identity_adjacency_without_residual(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 3, 4, 5))
        g = build_graph(5, [])  # self-loops only: A_hat is the identity
        bn = random_bn(rng, 3)
        block = SgcnBlock(W=Param(np.eye(3)), M=Param(np.ones((5, 5))), bn=bn, use_residual=False)
        out = sgcn_block(Tensor(x), block, g, training=False).data
        np.testing.assert_allclose(out, nn.relu(nn.batchnorm(Tensor(x), bn, False)).data, atol=1e-15)

    def test_default_shapes(self, default_model):
        x = Tensor(np.zeros((4, 64, 300, 25), dtype=np.float32))
        assert sgcn_block(x, default_model.sgcn1, default_model.graph).shape == (4, 128, 300, 25)

    def test_wrong_joint_count(self, default_model):
        with pytest.raises(ShapeError):
            sgcn_block(Tensor(np.zeros((1, 64, 4, 24), dtype=np.float32)), default_model.sgcn1, default_model.graph)


class TestSepTcnBlock:
    def test_halves_time(self, default_model):
        x = Tensor(np.zeros((4, 256, 300, 25), dtype=np.float32))
        assert sep_tcn_block(x, default_model.septcn2).shape == (4, 256, 150, 25)

    def test_delta_kernel(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 3, 6, 4))
        block = random_septcn(rng, 3, 3, 1)
        block.dw.data[:] = (0, 1, 0)
        block.pw.data[:] = np.eye(3)
        out = sep_tcn_block(Tensor(x), block, training=False).data
        expected = nn.relu(nn.add(nn.batchnorm(Tensor(x), block.bn, False), Tensor(x))).data
        np.testing.assert_allclose(out, expected, atol=1e-15)

    @pytest.mark.parametrize("K, stride", [(3, 1), (5, 2)])
    def test_matches_loop(self, K, stride):
        rng = np.random.default_rng(K)
        x = rng.normal(size=(2, 3, 7, 4))
        b = random_septcn(rng, 3, K, stride)
        out = sep_tcn_block(Tensor(x), b, training=False).data
        expected = sep_tcn_block_loop(x, b.dw.data, b.pw.data, stride, b.bn.gamma.data, b.bn.beta.data,
                                      b.bn.running_mean, b.bn.running_var, b.bn.eps)
        np.testing.assert_allclose(out, expected, atol=1e-12)


class TestFusion:
    def test_additive(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(size=(2, 4, 8, 25)))
        fused = tiny_model(fusion="early_fused")
        joint = tiny_model(fusion="joint")
        motion = tiny_model(fusion="motion")
        joint.joint_encoder = fused.joint_encoder
        motion.motion_encoder = fused.motion_encoder
        np.testing.assert_allclose(fuse_streams(x, fused).data,
                                   fuse_streams(x, joint).data + fuse_streams(x, motion).data, atol=1e-12)

    def test_motion_only_on_static_input(self):
        model = tiny_model(fusion="motion")
        x = Tensor(np.broadcast_to(np.random.default_rng(7).normal(size=(1, 4, 1, 25)), (1, 4, 8, 25)).copy())
        out = fuse_streams(x, model).data
        enc = model.motion_encoder
        zero_in = nn.batchnorm(Tensor(np.zeros((1, 4, 1, 1))), enc.bn, False).data[0, :, 0, 0]
        expected = enc.W.data @ zero_in + enc.b.data
        np.testing.assert_allclose(out, np.broadcast_to(expected[None, :, None, None], out.shape), atol=1e-12)

    def test_default_shape(self, default_model):
        x = Tensor(np.zeros((4, 3, 300, 25), dtype=np.float32))
        assert fuse_streams(x, default_model).shape == (4, 64, 300, 25)


class TestForward:
    def test_logit_shape(self, default_model):
        assert forward(default_model, np.zeros((1, 3, 300, 25), dtype=np.float32)).shape == (1, 2)

    def test_eval_determinism(self):
        model = tiny_model(dtype=np.float32)
        x = np.random.default_rng(8).normal(size=(3, 4, 8, 25)).astype(np.float32)
        a = forward(model, x).data
        b = forward(model, x).data
        np.testing.assert_array_equal(a, b)
        twins = forward(model, np.stack([x[0], x[0]])).data
        np.testing.assert_array_equal(twins[0], twins[1])

    def test_permutation(self):
        model = tiny_model()
        x = np.random.default_rng(9).normal(size=(5, 4, 8, 25))
        perm = np.array([3, 0, 4, 1, 2])
        np.testing.assert_allclose(forward(model, x[perm]).data, forward(model, x).data[perm], atol=1e-12)

    def test_frozen_adjacency_equals_unmodulated(self):
        x = np.random.default_rng(10).normal(size=(2, 4, 8, 25))
        with_m = build_model(ModelConfig(in_channels=4, channel_plan=(4, 6, 6), target_length=8), 0, dtype=F64)
        without = build_model(ModelConfig(in_channels=4, channel_plan=(4, 6, 6), target_length=8,
                                          use_learnable_adjacency=False), 0, dtype=F64)
        assert without.sgcn1.M is None
        np.testing.assert_array_equal(forward(with_m, x).data, forward(without, x).data)

    def test_training_mode_is_seeded(self):
        x = np.random.default_rng(11).normal(size=(2, 4, 8, 25))
        runs = [forward(tiny_model(), x, training=True, rng=np.random.default_rng(1)).data for _ in range(2)]
        np.testing.assert_array_equal(*runs)

    def test_wrong_channels(self, default_model):
        with pytest.raises(ShapeError):
            forward(default_model, np.zeros((1, 2, 10, 25), dtype=np.float32))

    def test_predict_proba_rows_sum_to_one(self):
        p = predict_proba(tiny_model(), np.random.default_rng(12).normal(size=(3, 4, 8, 25)), batch_size=2)
        np.testing.assert_allclose(p.sum(axis=1), 1.0)


class TestBuild:
    def test_same_seed_same_parameters(self):
        a, b = build_model(seed=3), build_model(seed=3)
        for (na, pa), (nb, pb) in zip(a.named_params(), b.named_params()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_initial_values(self, default_model):
        np.testing.assert_array_equal(default_model.sgcn1.M.data, np.ones((25, 25)))
        bound = np.sqrt(1 / 64)
        assert np.abs(default_model.sgcn1.W.data).max() <= bound
        assert np.all(default_model.septcn1.bn.gamma.data == 1) and np.all(default_model.septcn1.bn.beta.data == 0)

    @pytest.mark.parametrize("bad", [dict(tcn_kernels=(4, 5)), dict(tcn_strides=(1, 3)), dict(channel_plan=(0, 1, 2)),
                                     dict(fusion="late"), dict(p_joint=1.0), dict(num_classes=1)])
    def test_invalid_config(self, bad):
        with pytest.raises(ConfigError):
            build_model(ModelConfig(**bad))

    def test_scalar_gate(self):
        model = tiny_model(adjacency_gate="scalar")
        assert model.sgcn1.M.shape == (1, 1)


class TestComplexity:
    def test_tiny_hand_enumeration(self):
        g = build_graph(3, [(0, 1), (1, 2)])
        model = build_model(ModelConfig(channel_plan=(2, 2, 2), target_length=4), graph=g)
        # encoders: 2 x (BN 3+3, W 2x3, b 2) = 28; graph blocks: 2 x (W 4, M 9, BN 4) = 34;
        # temporal blocks: (dw 6, pw 4, BN 4) + (dw 10, pw 4, BN 4) = 32; head: 4 + 2 = 6
        assert count_params(model) == 28 + 34 + 32 + 6
        # encoders 2*2*3*4*3 = 144; graph blocks 2*(2*2*4*3 + 3*3*2*4) = 240;
        # temporal (T=4) 2*3*4*3 + 2*2*4*3 = 120 and (T'=2) 2*5*2*3 + 2*2*2*3 = 84; head 4
        assert count_flops(model, (3, 4, 3)) == 144 + 240 + 120 + 84 + 4

    def test_enumeration_matches_parameter_arrays(self, default_model):
        assert count_params(default_model) == sum(arr.size for name, arr in default_model.state()
                                                  if "running_" not in name)

    def test_default_ranges(self, default_model):
        params = count_params(default_model)
        macs = count_flops(default_model, (3, 300, 25))
        assert 0.15e6 <= params <= 0.45e6
        assert 0.8e9 <= macs <= 1.5e9

    def test_wider_last_stage_costs_more(self, default_model):
        wide = build_model(ModelConfig(channel_plan=(64, 128, 512)))
        assert count_params(wide) > count_params(default_model)
        assert count_flops(wide, (3, 300, 25)) > count_flops(default_model, (3, 300, 25))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = tiny_model(dtype=np.float32)
        model.septcn1.bn.running_var[:] = 3.0
        save_checkpoint(model, tmp_path / "m.ckpt", extra={"seed": 4})
        again = load_checkpoint(tmp_path / "m.ckpt")
        for (n1, a), (n2, b) in zip(model.state(), again.state()):
            assert n1 == n2
            np.testing.assert_array_equal(a, b)
        x = np.random.default_rng(0).normal(size=(2, 4, 8, 25)).astype(np.float32)
        np.testing.assert_array_equal(forward(model, x).data, forward(again, x).data)

    def test_manifest_then_little_endian_floats(self, tmp_path):
        model = tiny_model(dtype=np.float32)
        save_checkpoint(model, tmp_path / "m.ckpt")
        head, _, body = (tmp_path / "m.ckpt").read_bytes().partition(b"\n")
        manifest = json.loads(head)
        first = manifest["tensors"][0]
        n = int(np.prod(first["shape"]))
        np.testing.assert_array_equal(np.frombuffer(body, "<f4", count=n).reshape(first["shape"]),
                                      model.state()[0][1])

    def test_rejects_version_and_shape(self, tmp_path):
        model = tiny_model(dtype=np.float32)
        save_checkpoint(model, tmp_path / "m.ckpt")
        head, _, body = (tmp_path / "m.ckpt").read_bytes().partition(b"\n")
        manifest = json.loads(head)
        manifest["format_version"] = 99
        (tmp_path / "v.ckpt").write_bytes(json.dumps(manifest).encode() + b"\n" + body)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "v.ckpt")
        manifest["format_version"] = 1
        manifest["tensors"][0]["shape"] = [1, 1]
        (tmp_path / "s.ckpt").write_bytes(json.dumps(manifest).encode() + b"\n" + body)
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "s.ckpt")
        (tmp_path / "t.ckpt").write_bytes(head + b"\n" + body[:10])
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "t.ckpt")
