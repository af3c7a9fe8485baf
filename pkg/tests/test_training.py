import math

import numpy as np
import pytest

from ltuning.adapters import METHODS, AdapterDims, build_adapter
from ltuning.backbone import BackboneConfig, init_backbone
from ltuning.data import SynthSpec, gen_synth
from ltuning.errors import ConfigError, DataError, TrainingDivergedError
from ltuning.evaluation import LabelSet
from ltuning.training import (
    Example, NliBatch, NliItem, TrainConfig, batch_loss, build_nli_batch, nli_validation_pairs, train,
    train_baseline,
)

SMALL = dict(steps=3, batch=4, eval_every=1, lr=1e-2)
TREND = dict(steps=50, batch=32, eval_every=50, lr=1e-2)


@pytest.fixture(scope='module')
def small_task():
    backbone = init_backbone(BackboneConfig(d=32, m=2, H=2, V=64, max_seq=32, seed=0))
    return backbone, gen_synth(SynthSpec(K=3, seed=0, V=64), 150, 30)


class TestConfig:
    def test_defaults_are_valid(self):
        cfg = TrainConfig().validate()
        assert (cfg.steps, cfg.batch, cfg.lr, cfg.eval_every) == (500, 32, 1e-3, 10)

    def test_odd_batch_cites_even_requirement(self):
        with pytest.raises(ConfigError, match='even'):
            TrainConfig(batch=7).validate()

    def test_zero_steps(self):
        with pytest.raises(ConfigError):
            TrainConfig(steps=0).validate()

    def test_unknown_optimizer(self):
        with pytest.raises(ConfigError):
            TrainConfig(optimizer='rmsprop').validate()


class TestBatches:
    def test_composition_over_many_batches(self, tokenizer_labels):
        data, labels = tokenizer_labels
        gold = _gold_labels(data, labels)
        rng = np.random.default_rng(0)
        for _ in range(1000):
            batch = build_nli_batch(data, labels, 32, rng)
            assert batch.size == 32
            assert batch.positives == 16 and batch.negatives == 16
            for item in batch.items:
                true_ids = labels.ids[gold[item.text_ids]]
                assert (item.target == 1) == (list(item.label_ids) == true_ids)

    def test_two_labels_force_the_complement(self, tokenizer_labels):
        data, labels4 = tokenizer_labels
        labels = LabelSet(labels4.labels[:2], labels4.tokenizer)
        data = [ex for ex in data if ex.label_index < 2]
        gold = _gold_labels(data, labels)
        batch = build_nli_batch(data, labels, 8, np.random.default_rng(1))
        for item in batch.items:
            if item.target == 0:
                assert item.label_ids == tuple(labels.ids[1 - gold[item.text_ids]])

    def test_deterministic(self, tokenizer_labels):
        data, labels = tokenizer_labels
        a = build_nli_batch(data, labels, 8, np.random.default_rng(5))
        b = build_nli_batch(data, labels, 8, np.random.default_rng(5))
        assert a == b

    def test_odd_batch(self, tokenizer_labels):
        data, labels = tokenizer_labels
        with pytest.raises(ConfigError):
            build_nli_batch(data, labels, 5, np.random.default_rng(0))

    def test_empty_data(self, tokenizer_labels):
        _, labels = tokenizer_labels
        with pytest.raises(DataError):
            build_nli_batch([], labels, 4, np.random.default_rng(0))

    def test_validation_negatives_avoid_gold(self):
        val = [Example('x', k % 3) for k in range(50)]
        for ex, neg in zip(val, nli_validation_pairs(val, 3, seed=0)):
            assert neg != ex.label_index and 0 <= neg < 3


@pytest.fixture
def tokenizer_labels(synth):
    return synth.examples('train'), synth.label_set()


def _gold_labels(data, labels):
    # batches keep token ids only; map them back to the gold label
    return {tuple(labels.tokenizer.encode(ex.text)): ex.label_index for ex in data}


class TestLoss:
    @pytest.mark.parametrize('method', ['lt-prefix', 'lt-prompt'])
    def test_zero_head_loss_is_ln2(self, backbone, tokenizer_labels, method):
        data, labels = tokenizer_labels
        adapter = build_adapter(method, AdapterDims.for_backbone(backbone.config, l=labels.l, K=labels.K))
        batch = build_nli_batch(data, labels, 8, np.random.default_rng(0))
        assert batch_loss(backbone, adapter, batch).item() == pytest.approx(math.log(2), abs=1e-5)

    def test_hand_built_batch(self, backbone, tokenizer_labels):
        data, labels = tokenizer_labels
        adapter = build_adapter('lt-prompt', AdapterDims.for_backbone(backbone.config, l=labels.l, K=labels.K))
        batch = NliBatch([NliItem((5, 6), tuple(labels.ids[0]), 1)])
        assert math.isfinite(batch_loss(backbone, adapter, batch).item())


class TestTrain:
    @pytest.mark.parametrize('method', ['lt-prefix', 'lt-prompt', 'prefix', 'prompt'])
    def test_first_loss_and_frozen_backbone(self, backbone, synth, method):
        labels = synth.label_set()
        before = backbone.checksum()
        result = train(backbone, method, synth.examples('train'), labels, TrainConfig(method=method, **SMALL),
                       val=synth.examples('val'))
        expected = math.log(2) if method.startswith('lt-') else math.log(labels.K)
        assert result.train_losses[0] == pytest.approx(expected, abs=1e-5)
        assert backbone.checksum() == before
        assert len(result.val_records()) == 3

    def test_one_step_one_record(self, backbone, synth):
        cfg = TrainConfig(steps=1, batch=4)
        result = train(backbone, 'lt-prompt', synth.examples('train'), synth.label_set(), cfg)
        assert [r.split for r in result.records] == ['train']

    def test_only_adapter_parameters_change(self, backbone, synth):
        labels = synth.label_set()
        result = train(backbone, 'lt-prompt', synth.examples('train'), labels, TrainConfig(**SMALL))
        fresh = build_adapter('lt-prompt', result.adapter.dims)
        assert not np.array_equal(result.adapter.params['zeta.head'].data, fresh.params['zeta.head'].data)

    def test_identical_seeds_identical_records(self, backbone, synth):
        labels = synth.label_set()
        runs = [train(backbone, 'lt-prefix', synth.examples('train'), labels, TrainConfig(**SMALL),
                      val=synth.examples('val')) for _ in range(2)]
        assert runs[0].records == runs[1].records

    def test_sgd(self, backbone, synth):
        cfg = TrainConfig(optimizer='sgd', **SMALL)
        result = train_baseline(backbone, 'prompt', synth.examples('train'), synth.label_set(), cfg)
        assert len(result.train_losses) == 3

    def test_baseline_rejects_nli_method(self, backbone, synth):
        with pytest.raises(ConfigError):
            train_baseline(backbone, 'lt-prompt', synth.examples('train'), synth.label_set(), TrainConfig(**SMALL))

    def test_divergence_names_the_step(self, backbone, synth):
        with pytest.raises(TrainingDivergedError) as e:
            train(backbone, 'prompt', synth.examples('train'), synth.label_set(),
                  TrainConfig(steps=3, batch=4, lr=float('inf')))
        assert e.value.step == 2


class TestLearning:
    @pytest.mark.parametrize('method', METHODS)
    def test_loss_trends_down_over_fifty_steps(self, small_task, method):
        backbone, data = small_task
        result = train(backbone, method, data.examples('train'), data.label_set(), TrainConfig(method=method, **TREND))
        losses = result.train_losses
        assert len(losses) == 50
        assert np.mean(losses[40:]) < np.mean(losses[:10])
