import numpy as np
import pytest

from dmu import numerics as nx
from dmu.models import (INFER, TRAIN, AdapterSpec, ClassifierSpec, EncoderSpec, ModelCheckpoint,
                        affine_macs, bias_terms, cosine_logits, init_model, load_checkpoint,
                        save_checkpoint)


@pytest.fixture
def encoder():
    enc = init_model(EncoderSpec(8, (16, 12), 6), seed=3)
    # give the running moments non-trivial values
    enc.encode(np.random.default_rng(0).normal(size=(32, 8)), TRAIN)
    return enc


class TestEncode:
    @pytest.mark.parametrize("mode", [TRAIN, INFER])
    def test_unit_norm(self, encoder, mode):
        out = encoder.encode(np.random.default_rng(1).normal(size=(10, 8)), mode)
        assert out.shape == (10, 6)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-6)

    def test_infer_is_batch_size_independent(self, encoder):
        x = np.random.default_rng(2).normal(size=(32, 8))
        full = encoder.encode(x, INFER)
        single = encoder.encode(x[5:6], INFER)
        np.testing.assert_allclose(full[5], single[0], atol=1e-9)

    def test_seeded_output_is_byte_identical(self):
        x = np.random.default_rng(4).normal(size=(5, 8))
        a = init_model(EncoderSpec(8, (16,), 4), 7).encode(x)
        b = init_model(EncoderSpec(8, (16,), 4), 7).encode(x)
        assert a.tobytes() == b.tobytes()

    def test_dimension_mismatch(self, encoder):
        with pytest.raises(nx.DimensionError):
            encoder.encode(np.ones((2, 9)))

    def test_bad_mode(self, encoder):
        with pytest.raises(ValueError):
            encoder.encode(np.ones((2, 8)), "eval")

    def test_parameter_count(self):
        enc = init_model(EncoderSpec(8, (16, 12), 6), 0)
        expected = (8 * 16 + 16 * 3) + (16 * 12 + 12 * 3) + (12 * 6 + 6)
        assert enc.parameter_count() == expected


class TestAdapter:
    def test_unit_norm_and_batch_independence(self):
        ad = init_model(AdapterSpec(6, 20), 5)
        rng = np.random.default_rng(6)
        old = rng.normal(size=(16, 6))
        old /= np.linalg.norm(old, axis=1, keepdims=True)
        ad.adapt(old, TRAIN)
        for mode in (TRAIN, INFER):
            np.testing.assert_allclose(np.linalg.norm(ad.adapt(old, mode), axis=1), 1.0, atol=1e-6)
        np.testing.assert_allclose(ad.adapt(old, INFER)[3], ad.adapt(old[3:4], INFER)[0], atol=1e-9)

    def test_three_blocks_required(self):
        with pytest.raises(ValueError):
            AdapterSpec(8, 16, blocks=2)

    def test_default_hidden_width(self):
        assert AdapterSpec(64).hidden_dim == 1024

    def test_full_scale_cost(self):
        ad = init_model(AdapterSpec(1024, 1024), 0)
        macs = affine_macs(ad)
        assert macs == 4 * 1024 * 1024
        assert bias_terms(ad) == 4 * 1024
        # "about 8M" is reached when each multiply-accumulate counts as two operations
        ops = 2 * macs + bias_terms(ad)
        assert abs(ops - 8e6) / 8e6 < 0.10

    def test_dimension_mismatch(self):
        with pytest.raises(nx.DimensionError):
            init_model(AdapterSpec(6, 8), 0).adapt(np.ones((2, 5)))


class TestCosineLogits:
    def test_equal_and_orthogonal(self):
        emb = np.array([[1.0, 0.0]])
        protos = np.array([[3.0, 0.0], [0.0, 2.0]])
        np.testing.assert_allclose(cosine_logits(emb, protos).value, [[1.0, 0.0]])

    def test_matches_dot_products(self):
        rng = np.random.default_rng(8)
        emb = rng.normal(size=(4, 5))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        protos = rng.normal(size=(3, 5))
        want = np.array([[e @ (w / np.linalg.norm(w)) for w in protos] for e in emb])
        got = cosine_logits(emb, protos).value
        np.testing.assert_allclose(got, want, atol=1e-12)
        assert np.all(np.abs(got) <= 1.0)

    def test_positive_rescaling_invariance(self):
        rng = np.random.default_rng(9)
        emb = rng.normal(size=(4, 5))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        protos = rng.normal(size=(3, 5))
        scaled = protos * rng.uniform(0.1, 10, size=(3, 1))
        np.testing.assert_allclose(cosine_logits(emb, protos).value,
                                   cosine_logits(emb, scaled).value, atol=1e-12)


class TestInit:
    def test_same_seed_same_params(self):
        a = init_model(EncoderSpec(4, (8,), 3), 11)
        b = init_model(EncoderSpec(4, (8,), 3), 11)
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])

    def test_different_seeds_differ(self):
        a = init_model(EncoderSpec(4, (8,), 3), 11)
        b = init_model(EncoderSpec(4, (8,), 3), 12)
        assert not np.array_equal(a.params["out.W"], b.params["out.W"])

    def test_prototypes_unit_norm_and_biases_zero(self):
        cls = init_model(ClassifierSpec(5, (0, 1, 2, 7)), 1)
        np.testing.assert_allclose(np.linalg.norm(cls.prototypes, axis=1), 1.0)
        enc = init_model(EncoderSpec(4, (8,), 3), 1)
        assert not enc.params["block0.b"].any() and not enc.params["out.b"].any()

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            init_model(EncoderSpec(0, (8,), 3), 0)
        with pytest.raises(ValueError):
            init_model({"kind": "encoder"}, 0)

    def test_local_labels(self):
        cls = init_model(ClassifierSpec(5, (2, 5, 9)), 0)
        assert cls.local_labels([9, 2, 4]).tolist() == [2, 0, -1]


def test_checkpoint_round_trip(tmp_path, encoder):
    cls = init_model(ClassifierSpec(6, (0, 1, 3)), 2)
    ad = init_model(AdapterSpec(6, 10), 3)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, ModelCheckpoint(encoder, cls, ad, {"generation": 2, "method": "dmu"}))
    back = load_checkpoint(path)
    x = np.random.default_rng(5).normal(size=(7, 8))
    assert back.encoder.encode(x).tobytes() == encoder.encode(x).tobytes()
    assert back.adapter.adapt(encoder.encode(x)).tobytes() == ad.adapt(encoder.encode(x)).tobytes()
    np.testing.assert_array_equal(back.classifier.prototypes, cls.prototypes)
    assert back.classifier.spec.class_ids == (0, 1, 3)
    assert back.metadata == {"generation": 2, "method": "dmu"}
    path2 = tmp_path / "m2.ckpt"
    save_checkpoint(path2, back)
    assert path.read_bytes() == path2.read_bytes()
