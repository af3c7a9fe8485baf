"""Desk-scale training runs on the 4-class keyword task. Run with `pytest -m slow`."""

import math

import pytest

from ltuning.adapters import BASELINE_METHODS, METHODS, NLI_METHODS
from ltuning.backbone import BackboneConfig, init_backbone
from ltuning.data import SynthSpec, gen_synth
from ltuning.evaluation import compare_convergence, evaluate
from ltuning.training import TrainConfig, train

pytestmark = pytest.mark.slow


@pytest.fixture(scope='module')
def task():
    backbone = init_backbone(BackboneConfig())
    data = gen_synth(SynthSpec(K=4, seed=0), 2000, 400)
    return backbone, data, data.label_set()


@pytest.mark.parametrize('method', METHODS)
def test_learnability(task, method):
    backbone, data, labels = task
    before = backbone.checksum()
    result = train(backbone, method, data.examples('train'), labels, TrainConfig(method=method),
                   val=data.examples('val'))
    metrics = evaluate(backbone, result.adapter, data.examples('val'), labels)
    assert backbone.checksum() == before
    assert metrics['accuracy'] >= (0.95 if method in NLI_METHODS else 0.90)


def test_label_conditioned_methods_converge_no_slower(task):
    backbone, data, labels = task
    result = compare_convergence(backbone, list(METHODS), data.examples('train'), labels, [0, 1, 2, 3, 4], 0.3,
                                 TrainConfig(), data.examples('val'))
    assert not result.failures
    medians = {method: result.median_steps(method) for method in METHODS}
    assert all(math.isfinite(steps) for steps in medians.values()), medians
    for baseline, label_tuned in zip(BASELINE_METHODS, ('lt-prefix', 'lt-prompt')):
        assert medians[label_tuned] <= medians[baseline]
