import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from oracles import gradcheck
from spmeid.errors import AutodiffError, ConfigError
from spmeid.nn import (Adam, CosineSchedule, Encoder, EncoderConfig, Linear,
                       Tensor, concat, encoder_param_count, load_checkpoint,
                       save_checkpoint, softmax, train_step, weight_checksum)


def _t(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def _rand(shape, seed=0, lo=-2.0, hi=2.0):
    return np.random.default_rng(seed).uniform(lo, hi, shape)


PRIMITIVES = [
    ("add", lambda a, b: (a + b).sum(), 2, {}),
    ("sub", lambda a, b: (a - b).sum(), 2, {}),
    ("mul", lambda a, b: (a * b * 0.5).sum(), 2, {}),
    ("div", lambda a, b: (a / b).sum(), 2, {"lo": 0.5, "hi": 2.0}),
    ("neg", lambda a: (-a).sum(), 1, {}),
    ("pow", lambda a: (a ** 3).mean(), 1, {"lo": 0.5, "hi": 2.0}),
    ("exp", lambda a: a.exp().sum(), 1, {}),
    ("log", lambda a: a.log().sum(), 1, {"lo": 0.5, "hi": 3.0}),
    ("sqrt", lambda a: a.sqrt().sum(), 1, {"lo": 0.5, "hi": 3.0}),
    ("tanh", lambda a: a.tanh().sum(), 1, {}),
    ("sigmoid", lambda a: a.sigmoid().sum(), 1, {}),
    ("asinh", lambda a: a.asinh().sum(), 1, {}),
    ("gelu", lambda a: a.gelu().sum(), 1, {}),
    ("clip", lambda a: a.clip(-0.9, 0.9).sum(), 1, {}),
    ("sum_axis", lambda a: (a.sum(axis=0) ** 2).sum(), 1, {}),
    ("mean", lambda a: (a.mean(axis=1) ** 2).sum(), 1, {}),
    ("reshape", lambda a: (a.reshape(12) ** 2).sum(), 1, {}),
    ("swapaxes", lambda a: (a.swapaxes(0, 1) * 2).sum(), 1, {}),
    ("getitem", lambda a: (a[1:, :2] ** 2).sum(), 1, {}),
    ("softmax", lambda a: (softmax(a, axis=1) ** 2).sum(), 1, {}),
    ("broadcast", lambda a: a.reshape(3, 4).broadcast_to((5, 3, 4)).sum(), 1, {}),
]


class TestPrimitiveGradients:
    @pytest.mark.parametrize("name,fn,arity,rng_kw",
                             PRIMITIVES, ids=[p[0] for p in PRIMITIVES])
    def test_matches_central_differences(self, name, fn, arity, rng_kw):
        tensors = [_t(_rand((3, 4), seed=i + 1, **rng_kw)) for i in range(arity)]
        assert gradcheck(fn, tensors) < 1e-3

    def test_matmul_2d(self):
        a, b = _t(_rand((3, 4), 1)), _t(_rand((4, 2), 2))
        assert gradcheck(lambda x, y: (x @ y).sum(), [a, b]) < 1e-3

    def test_matmul_batched(self):
        a, b = _t(_rand((2, 3, 4), 3)), _t(_rand((2, 4, 3), 4))
        assert gradcheck(lambda x, y: ((x @ y) ** 2).sum(), [a, b]) < 1e-3

    def test_matmul_broadcast_weight(self):
        a, b = _t(_rand((2, 5, 3), 5)), _t(_rand((3, 4), 6))
        assert gradcheck(lambda x, y: (x @ y).sum(), [a, b]) < 1e-3

    def test_concat(self):
        a, b = _t(_rand((2, 3), 7)), _t(_rand((2, 2), 8))
        assert gradcheck(
            lambda x, y: (concat([x, y], axis=1) ** 2).sum(), [a, b]) < 1e-3

    @given(arrays(np.float64, array_shapes(min_dims=1, max_dims=3, max_side=4),
                  elements=st.floats(-2.0, 2.0, width=64)))
    @settings(max_examples=20, deadline=None)
    def test_mul_broadcast_gradients_property(self, arr):
        a = _t(arr)
        b = _t(_rand(arr.shape[-1:], 9))
        assert gradcheck(lambda x, y: (x * y).sum(), [a, b]) < 1e-3

    def test_quadratic_gradient_closed_form(self):
        w = _t(_rand((6,), 10))
        loss = (w * w).sum()
        loss.backward()
        assert np.allclose(w.grad, 2.0 * w.data, rtol=1e-12)


class TestTape:
    def test_stale_tape_raises(self):
        w = _t(np.ones(3))
        loss = (w * w).sum()
        loss.backward()
        with pytest.raises(AutodiffError, match="stale tape"):
            loss.backward()

    def test_backward_requires_scalar(self):
        w = _t(np.ones(3))
        with pytest.raises(AutodiffError, match="scalar"):
            (w * 2).backward()

    def test_gradient_accumulates_over_shared_use(self):
        w = _t(np.array([1.5]))
        loss = (w * w + w * 3.0).sum()
        loss.backward()
        assert w.grad[0] == pytest.approx(2 * 1.5 + 3.0)


class TestEncoder:
    def test_causal_outputs_bit_identical_before_perturbation(self):
        cfg = EncoderConfig(causal=True, max_len=64)
        enc = Encoder(6, cfg, np.random.default_rng(0))
        x = _rand((12, 6), 11).astype(np.float32)
        base = enc(Tensor(x)).data.copy()
        x2 = x.copy()
        x2[8:] += 1.7
        out = enc(Tensor(x2)).data
        assert np.array_equal(base[:8], out[:8])
        assert not np.array_equal(base[8:], out[8:])

    def test_causal_gradient_wrt_future_is_exactly_zero(self):
        cfg = EncoderConfig(causal=True, max_len=64)
        enc = Encoder(4, cfg, np.random.default_rng(1))
        x = Tensor(_rand((10, 4), 12).astype(np.float32), requires_grad=True)
        out = enc(x)
        (out[:6] ** 2).sum().backward()
        assert np.all(x.grad[6:] == 0.0)
        assert np.any(x.grad[:6] != 0.0)

    def test_noncausal_attends_to_future(self):
        cfg = EncoderConfig(causal=False, max_len=64)
        enc = Encoder(4, cfg, np.random.default_rng(2))
        x = _rand((10, 4), 13).astype(np.float32)
        base = enc(Tensor(x)).data.copy()
        x2 = x.copy()
        x2[9] += 1.0
        assert not np.array_equal(base[:9], enc(Tensor(x2)).data[:9])

    def test_zeroed_projections_leave_residual_path(self):
        cfg = EncoderConfig(causal=True, max_len=32)
        rng = np.random.default_rng(3)
        enc = Encoder(5, cfg, rng)
        for layer in enc.layers:
            layer.attn.w_out.W.data[:] = 0.0
            layer.attn.w_out.b.data[:] = 0.0
            layer.ff.lin2.W.data[:] = 0.0
            layer.ff.lin2.b.data[:] = 0.0
        x = _rand((7, 5), 14).astype(np.float32)
        embedded = enc.embed2(enc.embed1(Tensor(x)).gelu()).data
        expected = enc.norm_out(
            Tensor(embedded * enc._scale + enc._posenc[:7])).data
        assert np.allclose(enc(Tensor(x)).data, expected, atol=1e-7)

    def test_parameter_count_matches_closed_form(self):
        for preset, d_in, d_out in ((dict(n_layers=1, n_heads=1, d_model=8,
                                          d_ff=16), 14, 4),
                                    (dict(n_layers=4, n_heads=4, d_model=96,
                                          d_ff=192), 14, 4)):
            cfg = EncoderConfig(causal=True, max_len=32, **preset)
            enc = Encoder(d_in, cfg, np.random.default_rng(0))
            head = Linear(cfg.d_model, d_out, np.random.default_rng(1))
            actual = enc.num_params() + head.W.size + head.b.size
            predicted = encoder_param_count(d_in, cfg, d_out)
            print(f"{preset}: {actual} trainable weights")
            assert actual == predicted

    def test_shape_mismatch_reports_expected_and_actual(self):
        cfg = EncoderConfig(max_len=32)
        enc = Encoder(6, cfg, np.random.default_rng(0))
        with pytest.raises(AutodiffError, match="d_in=6.*got 4"):
            enc(Tensor(np.zeros((5, 4), dtype=np.float32)))

    def test_sequence_longer_than_max_len_rejected(self):
        cfg = EncoderConfig(max_len=8)
        enc = Encoder(3, cfg, np.random.default_rng(0))
        with pytest.raises(AutodiffError, match="max_len"):
            enc(Tensor(np.zeros((9, 3), dtype=np.float32)))

    def test_config_invariants(self):
        with pytest.raises(ConfigError):
            EncoderConfig(d_model=9, n_heads=2)
        with pytest.raises(ConfigError):
            EncoderConfig(n_layers=0)


class _Quadratic:
    """Tiny model for optimizer tests."""

    def __init__(self, w0):
        self.w = Tensor(np.asarray(w0, dtype=np.float32), requires_grad=True)

    def params(self):
        return [self.w]

    def named_params(self):
        return {"w": self.w}

    def loss(self, batch):
        target = Tensor(np.asarray(batch[0], dtype=np.float32))
        diff = self.w - target
        return (diff * diff).mean()


class TestTraining:
    def test_zero_learning_rate_keeps_weights(self):
        model = _Quadratic(np.ones(4))
        before = model.w.data.copy()
        opt = Adam(model.params(), lr=0.0)
        train_step(model, (np.zeros(4),), opt)
        assert np.array_equal(model.w.data, before)

    def test_identical_seeds_give_identical_checksums(self):
        def run():
            cfg = EncoderConfig(max_len=16)
            enc = Encoder(3, cfg, np.random.default_rng(7))
            head = Linear(cfg.d_model, 1, np.random.default_rng(8))

            class M:
                def params(self):
                    return enc.params() + head.params()

                def named_params(self):
                    out = dict(enc.named_params())
                    out.update({f"head.{k}": v
                                for k, v in head.named_params().items()})
                    return out

                def loss(self, batch):
                    x, targ = batch
                    pred = head(enc(Tensor(x)))
                    diff = pred - Tensor(targ)
                    return (diff * diff).mean()

            model = M()
            opt = Adam(model.params(), CosineSchedule(1e-3, 1e-5, 30))
            rng = np.random.default_rng(9)
            for _ in range(30):
                x = rng.normal(size=(6, 3)).astype(np.float32)
                t = rng.normal(size=(6, 1)).astype(np.float32)
                train_step(model, (x, t), opt)
            return weight_checksum(model)

        assert run() == run()

    def test_single_batch_overfit_drives_loss_down(self):
        model = _Quadratic(np.full(8, 5.0))
        opt = Adam(model.params(), CosineSchedule(1e-1, 1e-2, 200))
        target = np.linspace(-1, 1, 8)
        losses = [train_step(model, (target,), opt) for _ in range(200)]
        assert np.mean(losses[-50:]) < np.mean(losses[:50])
        assert losses[-1] < 1e-3

    def test_nonfinite_loss_aborts_with_fingerprint(self):
        model = _Quadratic(np.array([np.inf]))
        opt = Adam(model.params(), lr=1e-3)
        with pytest.raises(AutodiffError, match="fingerprint"):
            train_step(model, (np.zeros(1),), opt)

    def test_gradient_clipping_bounds_update_norm(self):
        model = _Quadratic(np.full(4, 100.0))
        opt = Adam(model.params(), lr=1e-3, clip_norm=1.0)
        model.loss((np.zeros(4),)).backward()
        norm = opt.step()
        assert norm > 1.0
        assert np.linalg.norm(model.w.grad) <= 1.0 + 1e-6


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        path = tmp_path / "model.ckpt"
        params = {"a.W": np.arange(6, dtype=np.float32).reshape(2, 3),
                  "a.b": np.array([1.5], dtype=np.float32)}
        save_checkpoint(path, "NSPM", {"seed": 3, "d_model": 8}, params)
        kind, header, loaded = load_checkpoint(path)
        assert kind == "NSPM"
        assert header["seed"] == "3"
        assert list(loaded) == ["a.W", "a.b"]
        for key in params:
            assert np.array_equal(loaded[key], params[key])

    def test_magic_enforced(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(ConfigError, match="magic"):
            load_checkpoint(path)

    def test_header_first_bytes(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, "PUNT", {}, {"w": np.zeros(2, dtype=np.float32)})
        assert path.read_bytes()[:8] == b"NNCKPT01"
