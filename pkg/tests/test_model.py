import numpy as np
import pytest

from bfscnn import model, nn
from bfscnn.model import (ArchitectureError, ArchitectureSpec, CheckpointError, ConvSpec, InferencePlan,
                          TrainConfig, TrainingError, bgs_to_tensor, build_network,
                          checkpoint_from_network, count_parameters, decode_checkpoint,
                          encode_checkpoint, forward_bfs, infer_distributed, network_from_checkpoint)
from bfscnn.spectra import SimRanges, SweepRange, make_test_set, make_training_batch

from conftest import calibrate, units

SMALL = ArchitectureSpec.small()


def data(n, seed=0):
    return make_training_batch(n, SimRanges(), SweepRange(), np.random.default_rng(seed))


@pytest.fixture(scope="module")
def default_net():
    return calibrate(build_network(ArchitectureSpec(), np.random.default_rng(0)))


@pytest.fixture(scope="module")
def small_net():
    return calibrate(build_network(SMALL, np.random.default_rng(1)))


class TestArchitecture:
    def test_frequency_schedule(self):
        assert ArchitectureSpec().frequency_schedule() == [151, 76, 76, 35, 15, 5, 3, 1, 1]

    def test_parameter_count(self):
        # stem, six bottleneck blocks, seven head layers; BN adds 2 per channel
        stem = 3 * 3 * 1 * 64 + 64 + 128
        block = 3 * (64 * 64 + 64 + 128) + 8 * 64 * 64
        head = (3 * 64 * 64 + 64 + 128) + 3 * (7 * 64 * 64 + 64 + 128) + 2 * (3 * 64 * 64 + 64 + 128) \
            + (3 * 64 + 1)
        hand = stem + 6 * block + head
        assert hand == 398785
        assert count_parameters(ArchitectureSpec()) == hand
        assert build_network().n_parameters() == hand

    @pytest.mark.parametrize("n", [1, 7, 224])
    def test_output_shape(self, default_net, n):
        out, _ = default_net.forward(np.zeros((151, n, 1, 1)), "infer")
        assert out.shape == (1, n, 1, 1)

    def test_small_shape_and_batch(self, small_net):
        out, _ = small_net.forward(np.zeros((151, 5, 1, 3)), "infer")
        assert out.shape == (1, 5, 1, 3)

    def test_wrong_input(self, small_net):
        with pytest.raises(nn.ShapeError):
            small_net.forward(np.zeros((150, 5, 1, 1)))

    def test_validate_rejects(self):
        with pytest.raises(ArchitectureError):
            ArchitectureSpec(head=(ConvSpec((3, 1), 1, bn=False, relu=False),)).validate()
        with pytest.raises(ArchitectureError):
            ArchitectureSpec(pool_extent=(2, 2), pool_stride=(2, 2)).validate()

    def test_spec_dict_round_trip(self):
        spec = ArchitectureSpec.small(6, 3)
        assert ArchitectureSpec.from_dict(spec.to_dict()) == spec

    def test_time_radius(self):
        assert ArchitectureSpec().time_radius() == 7


class TestForward:
    def test_deterministic_init(self):
        x = data(9)[0].matrix[:, :, None, None]
        a = build_network(SMALL, np.random.default_rng(5)).forward(x)[0]
        b = build_network(SMALL, np.random.default_rng(5)).forward(x)[0]
        np.testing.assert_array_equal(a, b)

    def test_tiled_input_equivariance(self, default_net):
        d, _ = data(30, 2)
        r = default_net.spec.time_radius()
        one = forward_bfs(default_net, d)
        two = forward_bfs(default_net, type(d)(d.sweep, np.concatenate([d.matrix, d.matrix], 1)))
        assert np.ptp(one) > 0
        np.testing.assert_allclose(two[r:30 - r], one[r:30 - r], rtol=0, atol=1e-12)
        np.testing.assert_allclose(two[30 + r:60 - r], one[r:30 - r], rtol=0, atol=1e-12)

    def test_single_traces_equal_batch(self, default_net):
        # infer mode treats batch items independently
        d, _ = data(4, 3)
        batch = d.matrix[:, None, None, :]
        together = default_net.forward(batch)[0][0, 0, 0, :]
        alone = [default_net.forward(batch[..., k:k + 1])[0][0, 0, 0, 0] for k in range(4)]
        np.testing.assert_allclose(together, alone, rtol=0, atol=1e-12)

    def test_preprocessing_idempotent(self):
        d, _ = data(6)
        x = bgs_to_tensor(d)
        np.testing.assert_array_equal(x[:, :, 0, 0], d.matrix)
        again = bgs_to_tensor(type(d)(d.sweep, x[:, :, 0, 0]))
        np.testing.assert_array_equal(again, x)

    def test_resblock_wiring(self):
        rng = np.random.default_rng(0)
        block = model.ResBlock.create(rng, 3)
        for u in block.units:
            u.conv.w[:] = 0
            u.conv.b[:] = 0
        x = rng.standard_normal((6, 5, 3, 2))
        out, _ = block.forward(x, "infer")
        np.testing.assert_array_equal(out, np.maximum(x, 0))


def _loss(net, x, y):
    out, cache = net.forward(x, "train")
    return nn.mse_loss(out, y), cache


def _tiny_batch(seed, traces=4, batch=2):
    cfg = TrainConfig(batch_size=batch, traces=traces)
    return model.sample_batch(cfg, SimRanges(), SweepRange(), np.random.default_rng([seed, 5]))


class TestGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_end_to_end_finite_difference(self, seed):
        net = build_network(SMALL, np.random.default_rng(seed))
        x, y = _tiny_batch(seed)
        (loss, g), cache = _loss(net, x, y)
        grads = net.backward(g, cache)
        rng = np.random.default_rng([seed, 7])
        names = list(net.params())
        analytic, numeric = [], []
        for _ in range(50):
            name = names[rng.integers(len(names))]
            p = net.params()[name]
            idx = tuple(rng.integers(s) for s in p.shape)
            old = p[idx]
            p[idx] = old + 1e-5
            up = _loss(net, x, y)[0][0]
            p[idx] = old - 1e-5
            dn = _loss(net, x, y)[0][0]
            p[idx] = old
            analytic.append(grads[name][idx])
            numeric.append((up - dn) / 2e-5)
        assert nn.relative_error(np.array(analytic), np.array(numeric)) < 1e-3

    def test_descent_sanity(self):
        ok = 0
        for seed in range(20):
            net = build_network(SMALL, np.random.default_rng(seed))
            x, y = _tiny_batch(seed, traces=8)
            (before, g), cache = _loss(net, x, y)
            grads = net.backward(g, cache)
            nn.adam_step(net.params(), grads, nn.AdamState(alpha=1e-5))
            after = _loss(net, x, y)[0][0]
            ok += after <= before
        assert ok >= 18

    def test_grad_keys_match_params(self, small_net):
        x, y = _tiny_batch(0)
        (loss, g), cache = _loss(small_net, x, y)
        grads = small_net.backward(g, cache)
        assert list(grads) == list(small_net.params())
        for k, v in grads.items():
            assert v.shape == small_net.params()[k].shape


class TestTraining:
    def test_paper_scale_arithmetic(self):
        cfg = TrainConfig()
        assert cfg.traces_per_epoch == 672_000
        assert cfg.traces_per_epoch * cfg.epochs == 14_784_000
        assert (cfg.epochs, cfg.batch_size, cfg.alpha0, cfg.decay) == (22, 8, 1e-3, 1e-4)

    def test_learning_rate_rules(self):
        assert TrainConfig().learning_rate(0) == 1e-3
        assert TrainConfig().learning_rate(10000) == pytest.approx(5e-4)
        lin = TrainConfig(decay_rule="linear", decay=1e-7)
        assert lin.learning_rate(1000) == pytest.approx(1e-3 - 1e-4)
        assert lin.learning_rate(10**5) == 0.0

    def test_anneal_step(self):
        cfg = TrainConfig(decay=0.0, anneal_from=800, anneal_factor=0.1)
        assert cfg.learning_rate(799) == 1e-3
        assert cfg.learning_rate(800) == pytest.approx(1e-4, rel=1e-15)
        assert TrainConfig(decay=0.0).learning_rate(10**6) == 1e-3
        with pytest.raises(ValueError):
            TrainConfig(anneal_factor=0.0)
        with pytest.raises(ValueError):
            TrainConfig(anneal_from=-1)

    def test_float32_training_tracks_float64(self):
        runs = {}
        for prec in ("float64", "float32"):
            cfg = TrainConfig(epochs=1, updates_per_epoch=3, batch_size=2, traces=4, seed=2,
                              precision=prec)
            runs[prec] = model.train(cfg, spec=SMALL)
        np.testing.assert_allclose(runs["float32"][1], runs["float64"][1], rtol=1e-4)
        ck = runs["float32"][0]
        assert ck.metadata["train_config"]["precision"] == "float32"
        assert all(a.dtype == np.float64 for a in ck.records.values())
        with pytest.raises(ValueError):
            TrainConfig(precision="float16")

    def test_zero_learning_rate(self):
        cfg = TrainConfig(epochs=2, updates_per_epoch=2, batch_size=1, traces=4, alpha0=0.0,
                          corpus_batches=1, seed=3)
        ckpt, losses = model.train(cfg, spec=SMALL)
        assert len(set(losses)) == 1
        init = build_network(SMALL, np.random.default_rng([3, model.STREAM_INIT]))
        for name, p in init.params().items():
            np.testing.assert_array_equal(ckpt.records[name], p)

    def test_zero_epochs_is_init(self):
        ckpt, losses = model.train(TrainConfig(epochs=0, seed=4), spec=SMALL)
        assert losses == []
        init = build_network(SMALL, np.random.default_rng([4, model.STREAM_INIT]))
        for name, p in init.state().items():
            np.testing.assert_array_equal(ckpt.records[name], p)

    def test_deterministic(self):
        cfg = TrainConfig(epochs=1, updates_per_epoch=3, batch_size=1, traces=4, seed=2)
        a = encode_checkpoint(model.train(cfg, spec=SMALL)[0])
        b = encode_checkpoint(model.train(cfg, spec=SMALL)[0])
        assert a == b

    def test_non_finite_loss_names_update(self, monkeypatch):
        real = model.sample_batch
        calls = []

        def poisoned(*args):
            x, y = real(*args)
            calls.append(1)
            if len(calls) == 3:
                x = x.copy()
                x[0, 0, 0, 0] = np.nan
            return x, y

        monkeypatch.setattr(model, "sample_batch", poisoned)
        with pytest.raises(TrainingError, match="update 2"):
            model.train(TrainConfig(epochs=1, updates_per_epoch=5, batch_size=1, traces=4),
                        spec=SMALL)

    def test_desk_run_reduces_loss(self):
        cfg = TrainConfig(epochs=2, updates_per_epoch=50, batch_size=4, traces=32, seed=0)
        _, losses = model.train(cfg)
        assert np.mean(losses[50:]) < np.mean(losses[:50])


class TestCheckpoint:
    def test_round_trip_bytes(self, small_net):
        ck = checkpoint_from_network(small_net, {"note": "x"})
        buf = encode_checkpoint(ck)
        back = decode_checkpoint(buf)
        assert encode_checkpoint(back) == buf
        assert back.spec == small_net.spec and back.metadata == {"note": "x"}
        net = network_from_checkpoint(back)
        x = data(5)[0].matrix[:, :, None, None]
        np.testing.assert_array_equal(net.forward(x)[0], small_net.forward(x)[0])

    def test_truncated(self, small_net):
        buf = encode_checkpoint(checkpoint_from_network(small_net))
        for cut in (3, 12, len(buf) // 2, len(buf) - 1):
            with pytest.raises(CheckpointError):
                decode_checkpoint(buf[:cut])

    def test_checksum(self, small_net):
        buf = bytearray(encode_checkpoint(checkpoint_from_network(small_net)))
        buf[-5] ^= 0xFF
        with pytest.raises(CheckpointError, match="checksum"):
            decode_checkpoint(bytes(buf))

    def test_magic(self, small_net):
        buf = encode_checkpoint(checkpoint_from_network(small_net))
        with pytest.raises(CheckpointError, match="magic"):
            decode_checkpoint(b"XXXX" + buf[4:])


class TestInference:
    def test_plan_matches_network(self, default_net):
        d, _ = data(40, 6)
        ref = forward_bfs(default_net, d)
        f64 = infer_distributed(InferencePlan(default_net, np.float64), d).values
        f64_unfused = infer_distributed(InferencePlan(default_net, np.float64, fused=False), d).values
        f32 = infer_distributed(default_net, d).values
        scale = np.max(np.abs(ref))
        assert np.max(np.abs(f64 - ref)) <= 1e-12 * max(scale, 1)
        assert np.max(np.abs(f64_unfused - ref)) <= 1e-12 * max(scale, 1)
        assert np.max(np.abs(f32 - ref)) <= 1e-4 * max(scale, 1)

    def test_chunked_equals_single_pass(self, default_net):
        d, _ = data(60, 7)
        plan = InferencePlan(default_net, np.float64)
        whole = infer_distributed(plan, d, chunk=1000).values
        pieces = infer_distributed(plan, d, chunk=9).values
        np.testing.assert_allclose(pieces, whole, rtol=0, atol=1e-12)

    def test_pure(self, small_net):
        d, _ = data(20, 8)
        a = infer_distributed(small_net, d).values
        b = infer_distributed(small_net, d).values
        np.testing.assert_array_equal(a, b)
        assert len(a) == 20

    def test_resamples_other_grids(self, small_net):
        d, _ = make_test_set(0.3, 0.25, 11, 5, SweepRange(n_points=201), np.random.default_rng(0))
        assert len(infer_distributed(small_net, d)) == 5
