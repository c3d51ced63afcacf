import numpy as np
import pytest

from deeplf import net as dnet
from deeplf import ops
from deeplf.net import (
    AsppConfig,
    NetworkConfig,
    build_network,
    load_checkpoint,
    save_checkpoint,
)


def tiny_config(**overrides):
    base = dict(
        encoder_widths=(4, 6, 8, 8),
        aspp=AsppConfig(rates=(2, 3), branch_channels=4, out_channels=6),
        decoder_channels=8,
        low_level_projection_channels=4,
    )
    base.update(overrides)
    return NetworkConfig(**base)


class TestConfigs:
    def test_default_config_valid(self):
        NetworkConfig().validate()

    def test_rejects_duplicate_rates(self):
        with pytest.raises(ValueError, match="distinct"):
            NetworkConfig(aspp=AsppConfig(rates=(6, 6, 18))).validate()

    def test_rejects_rate_below_two(self):
        with pytest.raises(ValueError, match=">= 2"):
            NetworkConfig(aspp=AsppConfig(rates=(1, 6))).validate()

    def test_rejects_wrong_stride(self):
        with pytest.raises(ValueError, match="output_stride"):
            NetworkConfig(output_stride=8).validate()

    def test_rejects_single_class(self):
        with pytest.raises(ValueError, match="num_classes"):
            NetworkConfig(num_classes=1).validate()

    def test_round_trips_through_dict(self):
        cfg = tiny_config()
        assert NetworkConfig.from_dict(cfg.to_dict()) == cfg


class TestBuild:
    def test_same_seed_bitwise_identical(self):
        a = build_network(tiny_config(), seed=5)
        b = build_network(tiny_config(), seed=5)
        pa, pb = a.parameters(), b.parameters()
        assert pa.keys() == pb.keys()
        for k in pa:
            assert np.array_equal(pa[k], pb[k]), k

    def test_different_seed_differs(self):
        a = build_network(tiny_config(), seed=5)
        b = build_network(tiny_config(), seed=6)
        assert not np.array_equal(
            a.parameters()["encoder.stem.conv.weight"],
            b.parameters()["encoder.stem.conv.weight"],
        )

    def test_init_statistics(self):
        cfg = NetworkConfig()
        n = build_network(cfg, seed=0)
        params = n.parameters()
        w = params["decoder.refine0.conv.weight"]
        fan_in = w.shape[1] * w.shape[2] * w.shape[3]
        assert w.std() == pytest.approx(np.sqrt(2.0 / fan_in), rel=0.1)
        assert np.array_equal(params["decoder.refine0.conv.bias"], 0 * params["decoder.refine0.conv.bias"])
        assert np.all(params["encoder.stem.bn.gamma"] == 1.0)
        assert np.all(params["encoder.stem.bn.beta"] == 0.0)

    def test_encoder_stride_geometry(self):
        n = build_network(NetworkConfig(), seed=0)
        x = np.zeros((1, 1, 256, 256), dtype=np.float32)
        feats, low = n.encode(x, "train")
        assert feats.shape[2:] == (16, 16)
        assert low.shape[2:] == (64, 64)

    def test_parameter_count_is_sum_of_shapes(self):
        n = build_network(tiny_config(), seed=1)
        assert n.num_parameters() == sum(p.size for p in n.parameters().values())

    def test_invalid_config_rejected_at_build(self):
        with pytest.raises(ValueError, match="output_stride"):
            build_network(NetworkConfig(output_stride=32), seed=0)


class TestAspp:
    def test_concat_and_projection_shapes(self):
        cfg = NetworkConfig(
            encoder_widths=(8, 16, 32, 64),
            aspp=AsppConfig(rates=(6, 12, 18), branch_channels=32, out_channels=24),
        )
        n = build_network(cfg, seed=0)
        x = np.random.default_rng(0).standard_normal((1, 64, 16, 16)).astype(np.float32)
        y = n.aspp.forward(x, "train")
        # 1x1 + three rates + image pooling = 5 branches of 32 -> projected
        assert y.shape == (1, 24, 16, 16)

    def test_zero_input_zero_output(self):
        n = build_network(tiny_config(), seed=0)
        x = np.zeros((2, 8, 4, 4), dtype=np.float32)
        y = n.aspp.forward(x, "train")
        assert np.allclose(y, 0.0)

    def test_matches_branchwise_composition(self):
        cfg = tiny_config(encoder_widths=(4, 6, 2, 2),
                          aspp=AsppConfig(rates=(2, 3), branch_channels=3, out_channels=5))
        n = build_network(cfg, seed=3, dtype=np.float64)
        block = n.aspp
        rng = np.random.default_rng(7)
        x = rng.standard_normal((1, 2, 8, 8))
        got = block.forward(x, "train")

        # independent composition from the primitive ops, branch by branch
        def conv_bn_relu(b, t):
            y, _ = ops.conv2d(t, b.conv.spec, b.conv.weight, b.conv.bias)
            y, _ = ops.batch_norm(
                y, b.bn.gamma, b.bn.beta, None, None, "train", b.bn.epsilon
            )
            y, _ = ops.relu(y)
            return y

        branches = [conv_bn_relu(block.pointwise, x)]
        for rb in block.rate_branches:
            branches.append(conv_bn_relu(rb, x))
        pooled, _ = ops.global_avg_pool(x)
        img = conv_bn_relu(block.image, pooled)
        img_up, _ = ops.bilinear_resize(img, 8, 8)
        branches.append(img_up)
        expect = conv_bn_relu(block.project, np.concatenate(branches, axis=1))
        assert np.allclose(got, expect, atol=1e-12)


class TestForward:
    def test_logit_shape_contract(self):
        n = build_network(tiny_config(), seed=0)
        x = np.random.default_rng(1).standard_normal((2, 1, 64, 64)).astype(np.float32)
        logits = n.forward(x, "train")
        assert logits.shape == (2, 2, 64, 64)

    def test_eval_forward_is_pure(self):
        n = build_network(tiny_config(), seed=0)
        x = np.random.default_rng(2).standard_normal((2, 1, 32, 32)).astype(np.float32)
        n.forward(x, "train")  # populate running stats
        stats_before = {k: v.copy() for k, v in n.buffers().items()}
        a = n.forward(x, "eval")
        b = n.forward(x, "eval")
        assert np.array_equal(a, b)
        for k, v in n.buffers().items():
            assert np.array_equal(v, stats_before[k]), k

    def test_indivisible_input_rejected(self):
        n = build_network(tiny_config(), seed=0)
        with pytest.raises(ValueError, match="divisible"):
            n.forward(np.zeros((1, 1, 60, 64), dtype=np.float32), "train")

    def test_doubling_size_changes_only_spatial_dims(self):
        n = build_network(tiny_config(), seed=0)
        for size in (32, 64):
            x = np.zeros((1, 1, size, size), dtype=np.float32)
            feats, low = n.encode(x, "train")
            assert feats.shape[1] == 8
            assert low.shape[1] == 6
            assert feats.shape[2] == size // 16
            assert low.shape[2] == size // 4

    def test_matches_composition_of_ops(self):
        # tiny double-precision net: logits equal the step-by-step pipeline
        cfg = tiny_config()
        n = build_network(cfg, seed=11, dtype=np.float64)
        rng = np.random.default_rng(4)
        x = rng.standard_normal((1, 1, 64, 64))
        got = n.forward(x, "train")

        def conv_bn_relu(b, t):
            y, _ = ops.conv2d(t, b.conv.spec, b.conv.weight, b.conv.bias)
            y, _ = ops.batch_norm(
                y, b.bn.gamma, b.bn.beta, None, None, "train", b.bn.epsilon
            )
            y, _ = ops.relu(y)
            return y

        t = conv_bn_relu(n.stem, x)
        low = None
        for i, blocks in enumerate(n.stages):
            for b in blocks:
                t = conv_bn_relu(b, t)
            if i == 1:
                low = t
        z = n.aspp.forward(t, "train")
        z, _ = ops.bilinear_resize(z, low.shape[2], low.shape[3])
        low_p = conv_bn_relu(n.low_proj, low)
        t = np.concatenate([z, low_p], axis=1)
        for b in n.refine:
            t = conv_bn_relu(b, t)
        t, _ = ops.conv2d(t, n.classifier.spec, n.classifier.weight, n.classifier.bias)
        expect, _ = ops.bilinear_resize(t, 64, 64)
        assert np.allclose(got, expect, atol=1e-10)


class TestBackward:
    def test_backward_without_forward_rejected(self):
        n = build_network(tiny_config(), seed=0)
        with pytest.raises(RuntimeError, match="train-mode forward"):
            n.backward(np.zeros((1, 2, 32, 32)))

    def test_eval_forward_invalidates_backward(self):
        n = build_network(tiny_config(), seed=0)
        x = np.zeros((1, 1, 32, 32), dtype=np.float32)
        n.forward(x, "train")
        n.forward(x, "eval")
        with pytest.raises(RuntimeError):
            n.backward(np.zeros((1, 2, 32, 32)))

    def test_zero_logit_grads_give_zero_param_grads(self):
        n = build_network(tiny_config(), seed=0)
        x = np.random.default_rng(3).standard_normal((1, 1, 32, 32)).astype(np.float32)
        logits = n.forward(x, "train")
        grads = n.backward(np.zeros_like(logits))
        for k, g in grads.items():
            assert np.allclose(g, 0.0), k

    def test_gradient_shapes_match_parameters(self):
        n = build_network(tiny_config(), seed=0)
        x = np.random.default_rng(5).standard_normal((2, 1, 32, 32)).astype(np.float32)
        logits = n.forward(x, "train")
        grads = n.backward(np.ones_like(logits))
        params = n.parameters()
        assert grads.keys() == params.keys()
        for k in params:
            assert grads[k].shape == params[k].shape, k

    def test_whole_network_gradient_check(self):
        n = build_network(tiny_config(), seed=9, dtype=np.float64)
        rng = np.random.default_rng(6)
        x = rng.standard_normal((2, 1, 32, 32))
        v = rng.standard_normal((2, 2, 32, 32))
        names = list(n.parameters().keys())
        arrays = [n.parameters()[k] for k in names]

        def loss_fn(params):
            return float((n.forward(x, "train") * v).sum())

        n.forward(x, "train")
        grads = n.backward(v)
        # epsilon 1e-6: large enough for clean double-precision differences,
        # small enough that probes rarely step across a ReLU kink
        err = ops.gradient_check(
            loss_fn, arrays, [grads[k] for k in names],
            epsilon=1e-6, max_probes=400, rng=rng,
        )
        assert err <= 1e-4, f"max relative error {err}"


class TestCheckpoint:
    def _trained_tiny(self, seed=0):
        n = build_network(tiny_config(), seed=seed)
        x = np.random.default_rng(8).standard_normal((2, 1, 32, 32)).astype(np.float32)
        n.forward(x, "train")  # populate running stats
        return n, x

    def test_round_trip_bitwise(self, tmp_path):
        n, x = self._trained_tiny()
        path = tmp_path / "ck.dlfn"
        save_checkpoint(n, path, metadata={"epoch": 3, "input_size": 32})
        loaded, meta = load_checkpoint(path)
        assert meta["epoch"] == 3
        pa, pb = n.parameters(), loaded.parameters()
        for k in pa:
            assert np.array_equal(pa[k], pb[k]), k
        for k, v in n.buffers().items():
            assert np.array_equal(v, loaded.buffers()[k]), k
        assert np.array_equal(n.forward(x, "eval"), loaded.forward(x, "eval"))

    def test_truncated_rejected(self, tmp_path):
        n, _ = self._trained_tiny()
        path = tmp_path / "ck.dlfn"
        save_checkpoint(n, path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 40])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "ck.dlfn"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)

    def test_bad_version_rejected(self, tmp_path):
        import struct

        n, _ = self._trained_tiny()
        path = tmp_path / "ck.dlfn"
        save_checkpoint(n, path)
        blob = bytearray(path.read_bytes())
        blob[4:8] = struct.pack("<I", 999)
        path.write_bytes(bytes(blob))
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(path)

    def test_shape_mismatch_names_parameter(self, tmp_path):
        import json
        import struct

        n, _ = self._trained_tiny()
        path = tmp_path / "ck.dlfn"
        save_checkpoint(n, path)
        blob = path.read_bytes()
        (header_len,) = struct.unpack_from("<I", blob, 8)
        header = json.loads(blob[12 : 12 + header_len].decode())
        header["params"][0]["shape"] = [1, 1, 1, 1]
        name = header["params"][0]["name"]
        new_header = json.dumps(header).encode()
        path.write_bytes(
            blob[:8] + struct.pack("<I", len(new_header)) + new_header
            + blob[12 + header_len :]
        )
        with pytest.raises(ValueError, match=name.replace(".", r"\.")):
            load_checkpoint(path)
