"""Transformer shapes, init statistics, causality, padding, gradient flow, checkpoints."""
import numpy as np
import pytest

from agreelab import numerics as nx
from agreelab.agreement import label_smoothed_nll
from agreelab.model import (DropoutKeys, ModelConfig, ModelError, Transformer, checkpoint_digest, init,
                            load_checkpoint, pad_batch, parameter_shapes, teacher_forcing)
from agreelab.tokenizer import BOS, EOS, PAD

from conftest import tiny_model


def random_batch(rng, V, B=3, Ts=6, Tt=5, tag=4):
    src = rng.integers(5, V, size=(B, Ts))
    src[:, 0] = tag
    tgt_in = rng.integers(5, V, size=(B, Tt))
    tgt_in[:, 0] = BOS
    return src, tgt_in


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(d_model=10, heads=4), dict(dropout=1.0), dict(dropout=-0.1),
                                    dict(encoder_layers=0), dict(vocab_size=0)])
    def test_invalid(self, kw):
        with pytest.raises(ModelError):
            init(ModelConfig(**{"vocab_size": 50, **kw}), 0)

    def test_default_shapes(self):
        cfg = ModelConfig(vocab_size=100)
        shapes = parameter_shapes(cfg)
        assert shapes["embed"] == (100, 64)
        assert shapes["enc0.self.wq"] == (64, 64)
        assert shapes["enc1.ffn.w1"] == (64, 256)
        assert shapes["dec1.ffn.w2"] == (256, 64)
        assert shapes["dec0.cross.bo"] == (64,)
        assert shapes["dec.ln_final.gain"] == (64,)
        n_enc = 2 * (4 * 64 * 64 + 4 * 64 + 2 * 2 * 64 + 64 * 256 + 256 + 256 * 64 + 64)
        n_dec = 2 * (8 * 64 * 64 + 8 * 64 + 3 * 2 * 64 + 64 * 256 + 256 + 256 * 64 + 64)
        total = 100 * 64 + n_enc + n_dec + 2 * 2 * 64
        assert sum(int(np.prod(s)) for s in shapes.values()) == total
        params = init(cfg, 0)
        assert {k: v.shape for k, v in params.items()} == shapes


class TestInit:
    def test_deterministic(self):
        cfg = ModelConfig(vocab_size=60, d_model=16, heads=2, d_ff=32)
        a, b = init(cfg, 5), init(cfg, 5)
        for k in a:
            np.testing.assert_array_equal(a[k].data, b[k].data)
        c = init(cfg, 6)
        assert not np.array_equal(a["embed"].data, c["embed"].data)

    def test_std_within_ten_percent(self):
        cfg = ModelConfig(vocab_size=400)
        params = init(cfg, 0)
        emb = params["embed"].data
        assert emb.size >= 10**4
        assert abs(emb.std() / 64 ** -0.5 - 1) < 0.1
        w = np.concatenate([params[f"enc{i}.ffn.w1"].data.ravel() for i in range(2)])
        assert abs(w.std() / 64 ** -0.5 - 1) < 0.1
        w2 = params["dec0.ffn.w2"].data
        assert abs(w2.std() / 256 ** -0.5 - 1) < 0.1
        assert np.all(params["enc0.ln_attn.gain"].data == 1.0)
        assert np.all(params["enc0.self.bq"].data == 0.0)

    def test_all_finite(self):
        params = init(ModelConfig(vocab_size=30, d_model=8, heads=2, d_ff=8), 1)
        assert all(np.all(np.isfinite(p.data)) for p in params.values())


class TestForward:
    def test_shape_and_eval_determinism(self, tiny):
        rng = np.random.default_rng(0)
        src, tgt = random_batch(rng, 40)
        a = tiny(src, tgt).data
        b = tiny(src, tgt).data
        assert a.shape == (3, 5, 40)
        np.testing.assert_array_equal(a, b)

    def test_causality_bit_identical(self, tiny):
        rng = np.random.default_rng(1)
        for trial in range(10):
            src, tgt = random_batch(rng, 40, Tt=7)
            t = int(rng.integers(1, 7))
            changed = tgt.copy()
            changed[:, t:] = rng.integers(5, 40, size=changed[:, t:].shape)
            a = tiny(src, tgt).data
            b = tiny(src, changed).data
            np.testing.assert_array_equal(a[:, :t], b[:, :t])

    def test_pad_invariance(self, tiny):
        rng = np.random.default_rng(2)
        src, tgt = random_batch(rng, 40)
        padded = np.concatenate([src, np.full((3, 4), PAD)], axis=1)
        np.testing.assert_allclose(tiny(src, tgt).data, tiny(padded, tgt).data, atol=1e-9, rtol=0)

    def test_pad_within_batch(self, tiny):
        # a short row padded inside a batch matches the same row run alone
        long = [4, 9, 10, 11, 12, 13]
        short = [4, 20, 21]
        tgt = np.array([[BOS, 7, 8], [BOS, 7, 8]])
        batched = tiny(pad_batch([long, short]), tgt).data
        alone = tiny(np.array([short]), tgt[:1]).data
        np.testing.assert_allclose(batched[1], alone[0], atol=1e-9, rtol=0)

    def test_too_long(self):
        m = tiny_model()
        src = np.full((1, 65), 5)
        with pytest.raises(ModelError):
            m(src, np.array([[BOS]]))

    def test_dropout_only_in_train_mode(self):
        m = tiny_model(dropout=0.3)
        rng = np.random.default_rng(3)
        src, tgt = random_batch(rng, 40)
        a = m(src, tgt, train=True, keys=DropoutKeys(0, 1)).data
        b = m(src, tgt, train=True, keys=DropoutKeys(0, 1)).data
        c = m(src, tgt, train=True, keys=DropoutKeys(0, 2)).data
        np.testing.assert_array_equal(a, b)
        assert not np.allclose(a, c)
        with pytest.raises(ModelError):
            m(src, tgt, train=True)
        np.testing.assert_array_equal(m(src, tgt).data, m(src, tgt).data)

    def test_fuzz_random_configs(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            heads = int(rng.choice([1, 2, 4]))
            d = heads * int(rng.integers(2, 6))
            V = int(rng.integers(8, 60))
            cfg = ModelConfig(vocab_size=V, encoder_layers=int(rng.integers(1, 3)),
                              decoder_layers=int(rng.integers(1, 3)), d_model=d, heads=heads,
                              d_ff=int(rng.integers(4, 20)), dropout=0.0, max_positions=32)
            m = Transformer.create(cfg, int(rng.integers(1000)))
            B, Ts, Tt = (int(x) for x in rng.integers(1, 6, size=3))
            src = rng.integers(4, V, size=(B, Ts))
            tgt = rng.integers(4, V, size=(B, Tt))
            out = m(src, tgt).data
            assert out.shape == (B, Tt, V)
            assert np.all(np.isfinite(out))


class TestGradientFlow:
    def test_no_dead_parameters(self):
        m = tiny_model(layers=2)
        rng = np.random.default_rng(5)
        src, _ = random_batch(rng, 40)
        tin, tout = teacher_forcing([list(rng.integers(5, 40, size=4)) + [EOS] for _ in range(3)])
        loss = label_smoothed_nll(m(src, tin), tout)
        nx.backward(loss)
        dead = [k for k, p in m.params.items() if p.grad is None or not np.any(p.grad)]
        assert dead == []

    def test_parameter_gradient_matches_finite_differences(self):
        m = tiny_model(d_model=8, d_ff=8, vocab_size=20)
        rng = np.random.default_rng(6)
        src, _ = random_batch(rng, 20)
        tin, tout = teacher_forcing([list(rng.integers(5, 20, size=3)) + [EOS] for _ in range(3)])
        loss = label_smoothed_nll(m(src, tin), tout)
        nx.backward(loss)
        for name in ("embed", "enc0.self.wq", "dec0.cross.wv", "dec0.ffn.b1", "dec.ln_final.gain"):
            p = m.params[name]
            idx = [tuple(int(rng.integers(s)) for s in p.shape) for _ in range(6)]
            num = nx.finite_diff_grad(lambda _: label_smoothed_nll(m(src, tin), tout), p, indices=idx)
            ana = np.array([p.grad[i] for i in idx])
            np.testing.assert_allclose(ana, [num[i] for i in idx], rtol=1e-4, atol=1e-8)


class TestCheckpoint:
    def test_bit_exact_reload(self, tmp_path, tiny):
        path = tmp_path / "m.ckpt"
        tiny.save(path, "abc", {"step": 3})
        cfg, params, header = load_checkpoint(path)
        assert cfg == tiny.cfg
        assert header["vocab_digest"] == "abc" and header["extra"] == {"step": 3}
        for k, p in tiny.params.items():
            np.testing.assert_array_equal(params[k].data, p.data)
        tiny.save(tmp_path / "again.ckpt", "abc", {"step": 3})
        assert checkpoint_digest(path) == checkpoint_digest(tmp_path / "again.ckpt")

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"garbage!" * 4)
        with pytest.raises(ModelError):
            load_checkpoint(path)


class TestBatchHelpers:
    def test_teacher_forcing(self):
        tin, tout = teacher_forcing([[7, 8, EOS], [9, EOS]])
        np.testing.assert_array_equal(tin, [[BOS, 7, 8], [BOS, 9, PAD]])
        np.testing.assert_array_equal(tout, [[7, 8, EOS], [9, EOS, PAD]])
