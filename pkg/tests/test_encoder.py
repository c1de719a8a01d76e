import zlib

import numpy as np
import pytest

from recruitenc import encoder as enc
from recruitenc.encoder import (EncoderModel, char_ngrams, encode, encode_backward, encode_forward, featurize,
                                field_forward, field_head, match_forward, match_head, nli_combine)
from recruitenc.numcore import finite_difference_check


@pytest.fixture(scope="module")
def model():
    return EncoderModel.init(dim=16, hash_size=2 ** 12, seed=5)


class TestFeaturize:
    def test_deterministic(self):
        assert featurize("Sales engineer") == featurize("Sales engineer")

    def test_bigram_enumeration(self):
        assert sorted(char_ngrams("ab", (2,))) == sorted(["^a", "ab", "b$"])
        fv = featurize("ab", (2,), hash_size=2 ** 20)
        expected = sorted({zlib.crc32(g.encode()) % 2 ** 20 for g in ("^a", "ab", "b$")})
        assert fv.indices.tolist() == expected
        assert fv.counts.tolist() == [1, 1, 1]

    def test_latin_lowercased_only(self):
        assert featurize("ENGINEER") == featurize("engineer")
        assert char_ngrams("กข", (2,)) == ["^ก", "กข", "ข$"]

    def test_word_order_matters(self):
        a = featurize("sales engineer", (2, 3, 4), 2 ** 20)
        b = featurize("engineer sales", (2, 3, 4), 2 ** 20)
        grams_a = set(char_ngrams("sales engineer"))
        grams_b = set(char_ngrams("engineer sales"))
        assert grams_a != grams_b
        assert a != b

    def test_indices_in_range(self):
        fv = featurize("วิศวกรขาย sales", hash_size=97)
        assert fv.indices.max() < 97 and fv.counts.min() >= 1

    def test_empty(self):
        with pytest.raises(ValueError):
            featurize("  ")


class TestEncode:
    def test_unit_norm(self, model):
        e = encode(model, ["sales", "วิศวกร", "a much longer description of a job posting", "x"])
        np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-5)

    def test_batch_vs_single(self, model):
        texts = ["sales engineer", "บัญชี", "data scientist", "hr"]
        batch = encode(model, texts)
        single = np.vstack([encode(model, [t]) for t in texts])
        np.testing.assert_allclose(batch, single, atol=1e-6)

    def test_random_strings_finite(self, model):
        e = encode(model, ["qzxv kplm", "ฮฬฦ"])
        c = float(e[0] @ e[1])
        assert np.isfinite(c) and -1 < c < 1

    def test_self_cosine(self, model):
        e = encode(model, ["sales"])[0]
        assert e @ e == pytest.approx(1.0, abs=1e-6)

    def test_empty_batch(self, model):
        with pytest.raises(ValueError):
            encode(model, [])

    def test_backward_matches_finite_differences(self):
        m = EncoderModel.init(dim=6, hash_size=64, seed=2, dtype=np.float64)
        texts = ["ab cd", "xyz", "กขค"]
        w = np.random.default_rng(0).normal(size=(3, 6))
        params = m.parameters()

        def loss(_):
            e, cache = encode_forward(m, texts)
            return float(np.sum(e * w)), encode_backward(m, cache, w)

        assert finite_difference_check(loss, params) < 1e-6


class TestNLICombine:
    def test_equal_inputs(self, rng):
        u = rng.normal(size=5)
        out = nli_combine(u, u)
        assert out.shape == (20,)
        assert not out[10:15].any()
        np.testing.assert_array_equal(out[15:], u * u)

    def test_opposite_inputs(self, rng):
        u = rng.normal(size=5)
        np.testing.assert_array_equal(nli_combine(u, -u)[15:], -u * u)

    def test_elementwise(self, rng):
        u, v = rng.normal(size=(2, 3, 4))
        out = nli_combine(u, v)
        for i in range(3):
            for j in range(4):
                assert out[i, j] == u[i, j]
                assert out[i, 4 + j] == v[i, j]
                assert out[i, 8 + j] == abs(u[i, j] - v[i, j])
                assert out[i, 12 + j] == u[i, j] * v[i, j]

    def test_mismatch(self):
        with pytest.raises(ValueError):
            nli_combine(np.ones(3), np.ones(4))


class TestHeads:
    def test_zero_match_head_is_half(self, rng):
        head = match_head(8, width=16).zeroed()
        p = match_forward(head, rng.normal(size=(4, 8)), rng.normal(size=(4, 8)))
        np.testing.assert_array_equal(p, 0.5)

    def test_match_probability_open_interval(self, rng):
        head = match_head(8, width=16, seed=1)
        u, v = rng.normal(size=(2, 50, 8))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        p = match_forward(head, u, v)
        assert np.all((p > 0) & (p < 1))

    def test_zero_field_head(self, rng):
        head = field_head(8, 28, width=16).zeroed()
        p = field_forward(head, rng.normal(size=(3, 8)))
        assert p.shape == (3, 28)
        np.testing.assert_array_equal(p, 0.5)

    def test_field_outputs_independent(self, rng):
        head = field_head(4, 5, width=8).zeroed()
        head.layers[-1].bias[2] = 3.0
        p = field_forward(head, rng.normal(size=4))
        assert p[2] > 0.5
        np.testing.assert_array_equal(np.delete(p, 2), 0.5)

    def test_head_width_check(self):
        with pytest.raises(ValueError):
            match_forward(match_head(8, width=4), np.ones(6), np.ones(6))

    def test_default_head_widths(self):
        head = match_head(128)
        assert [l.out_dim for l in head.layers] == [512, 512, 1]
        assert head.in_dim == 4 * 128
        assert field_head(128).out_dim == 28


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, model):
        heads = [match_head(16, width=8), field_head(16, 28, width=8)]
        path = tmp_path / "m.npz"
        enc.save_checkpoint(path, model, heads, {"note": "x"})
        m2, h2, meta = enc.load_checkpoint(path)
        np.testing.assert_array_equal(encode(m2, ["abc"]), encode(model, ["abc"]))
        assert set(h2) == {"match", "field"} and meta == {"note": "x"}

    def test_version_mismatch(self, tmp_path, model, monkeypatch):
        path = tmp_path / "m.npz"
        monkeypatch.setattr(enc, "CHECKPOINT_VERSION", 99)
        enc.save_checkpoint(path, model)
        monkeypatch.undo()
        with pytest.raises(enc.CheckpointError, match="format_version"):
            enc.load_checkpoint(path)
