import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from ltuning.backbone import (
    PAD_TOKEN, UNK_ID, UNK_TOKEN, BackboneConfig, PastKeyValues, Tokenizer, backbone_param_count,
    init_backbone, load_weights, save_weights, seeded_normal,
)
from ltuning.errors import BackboneConfigError, DataError, SequenceLengthError, ShapeError, VocabularyError
from ltuning.numerics import Tensor, finite_diff_check, mul, sum_all
from ltuning.weights import read_weight_file


class TestConfig:
    def test_d_must_divide_by_heads(self):
        with pytest.raises(BackboneConfigError):
            BackboneConfig(d=10, H=4).validate()

    @pytest.mark.parametrize('d,m,V,max_seq', [(8, 2, 64, 32), (16, 1, 100, 20), (64, 4, 512, 128)])
    def test_param_count_formula(self, d, m, V, max_seq):
        cfg = BackboneConfig(d=d, m=m, H=2, V=V, max_seq=max_seq)
        assert init_backbone(cfg).parameter_count() == V * d + max_seq * d + m * (12 * d * d + 13 * d) + 2 * d
        assert backbone_param_count(cfg) == init_backbone(cfg).parameter_count()


class TestInit:
    def test_deterministic(self, micro_config):
        assert init_backbone(micro_config).checksum() == init_backbone(micro_config).checksum()

    def test_seed_changes_weights(self, micro_config):
        other = BackboneConfig(**{**micro_config.to_dict(), 'seed': 1})
        assert init_backbone(micro_config).checksum() != init_backbone(other).checksum()

    def test_seeded_normal_statistics(self):
        z = seeded_normal(7, 'probe', (20000,))
        assert abs(z.mean()) < 0.05
        assert abs(z.std() - 1.0) < 0.05
        assert_array_equal(z, seeded_normal(7, 'probe', (20000,)))

    def test_frozen(self, backbone):
        assert backbone.frozen
        assert not any(p.requires_grad for p in backbone.parameters().values())


class TestPersistence:
    def test_round_trip(self, tmp_path, backbone):
        path = save_weights(backbone, tmp_path / 'backbone.ltw')
        loaded = load_weights(path)
        assert loaded.checksum() == backbone.checksum()
        assert loaded.config == backbone.config
        extras = read_weight_file(path).extras
        assert extras['kind'] == 'backbone'
        assert extras['param_count'] == backbone.parameter_count()
        assert extras['checksum'] == backbone.checksum()

    def test_files_are_byte_identical(self, tmp_path, micro_config):
        a = save_weights(init_backbone(micro_config), tmp_path / 'a.ltw').read_bytes()
        b = save_weights(init_backbone(micro_config), tmp_path / 'b.ltw').read_bytes()
        assert a == b


class TestForward:
    def test_output_shape(self, backbone):
        assert backbone.encode([2, 3, 4]).shape == (3, 8)
        assert backbone.encode([[2, 3, 4], [5, 6, 7]]).shape == (2, 3, 8)

    def test_causal(self, backbone):
        full = backbone.encode([2, 3, 4, 5]).data
        prefix = backbone.encode([2, 3]).data
        assert_allclose(full[:2], prefix, atol=1e-5)

    def test_batch_matches_single_with_padding(self, backbone):
        batch = backbone.encode([[2, 3, 4], [5, 6, 0]]).data
        assert_allclose(batch[1, :2], backbone.encode([5, 6]).data, atol=1e-5)
        assert_allclose(batch[0], backbone.encode([2, 3, 4]).data, atol=1e-5)

    def test_empty_prefix_is_identity(self, backbone, micro_config):
        ids = [2, 9, 4]
        assert_array_equal(backbone.encode_with_prefix(ids, PastKeyValues.empty(micro_config)).data,
                           backbone.encode(ids).data)

    def test_forward_from_embeddings_matches_encode(self, backbone):
        ids = [[2, 9, 4, 7], [5, 6, 3, 0]]
        assert_array_equal(backbone.forward_from_embeddings(backbone.embed(ids)).data, backbone.encode(ids).data)

    def test_zero_prefix_still_changes_output(self, backbone):
        z = np.zeros((2, 1, 4), dtype=np.float32)
        pkv = PastKeyValues([(Tensor(z), Tensor(z)) for _ in range(2)])
        assert not np.allclose(backbone.encode_with_prefix([2, 3, 4], pkv).data, backbone.encode([2, 3, 4]).data)

    def test_prefix_changes_output(self, backbone, rng):
        pkv = PastKeyValues([(Tensor(rng.standard_normal((2, 1, 4))), Tensor(rng.standard_normal((2, 1, 4))))
                             for _ in range(2)])
        assert not np.allclose(backbone.encode_with_prefix([2, 3], pkv).data, backbone.encode([2, 3]).data)

    def test_prefix_layer_mismatch(self, backbone, rng):
        pkv = PastKeyValues([(Tensor(np.zeros((2, 1, 4))), Tensor(np.zeros((2, 1, 4))))])
        with pytest.raises(ShapeError):
            backbone.encode_with_prefix([2, 3], pkv)

    def test_too_long(self, backbone):
        with pytest.raises(SequenceLengthError):
            backbone.encode([2] * 33)

    def test_prefix_counts_towards_max_seq(self, backbone):
        z = np.zeros((2, 2, 4))
        pkv = PastKeyValues([(Tensor(z), Tensor(z)) for _ in range(2)])
        with pytest.raises(SequenceLengthError):
            backbone.encode_with_prefix([2] * 31, pkv)

    def test_empty_sequence(self, backbone):
        with pytest.raises(SequenceLengthError):
            backbone.encode([])

    def test_out_of_vocabulary(self, backbone):
        with pytest.raises(VocabularyError):
            backbone.encode([2, 64])

    def test_embedding_gradient(self, backbone, rng):
        e = Tensor(0.1 * rng.standard_normal((3, 8)), requires_grad=True)
        r = Tensor(rng.standard_normal((3, 8)))
        report = finite_diff_check(lambda: sum_all(mul(backbone.forward_from_embeddings(e), r)), {'e': e}, mode='f64')
        assert report.passed, report.to_dict()

    def test_prefix_gradient(self, backbone, rng):
        keys = [Tensor(0.5 * rng.standard_normal((2, 2, 4)), requires_grad=True) for _ in range(4)]
        pkv = PastKeyValues([(keys[0], keys[1]), (keys[2], keys[3])])
        r = Tensor(rng.standard_normal((3, 8)))
        report = finite_diff_check(lambda: sum_all(mul(backbone.encode_with_prefix([2, 5, 7], pkv), r)),
                                   {f"pkv.{i}": k for i, k in enumerate(keys)}, mode='f64')
        assert report.passed, report.to_dict()


class TestTokenizer:
    def test_encode_lowercases_and_maps_unknowns(self):
        tok = Tokenizer.build(['hello', 'world'])
        assert tok.encode('Hello  WORLD zebra') == [2, 3, UNK_ID]
        assert tok.encode('') == []

    def test_decode(self):
        tok = Tokenizer.build(['hello', 'world'])
        assert tok.decode([3, 2]) == 'world hello'
        with pytest.raises(VocabularyError):
            tok.decode([9])

    def test_file_round_trip(self, tmp_path):
        tok = Tokenizer.build(['b', 'a', 'b'])
        tok.to_file(tmp_path / 'vocab.txt')
        assert Tokenizer.from_file(tmp_path / 'vocab.txt').vocabulary == [PAD_TOKEN, UNK_TOKEN, 'b', 'a']

    def test_vocabulary_must_start_with_specials(self):
        with pytest.raises(DataError):
            Tokenizer(['a', 'b'])
