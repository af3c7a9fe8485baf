import numpy as np
import pytest

from ltuning.adapters import AdapterDims
from ltuning.backbone import BackboneConfig, init_backbone
from ltuning.data import SynthSpec, gen_synth

# d=8, m=2, H=2 with room for the synthetic vocabulary (K=3 needs 60 words)
MICRO = dict(d=8, m=2, H=2, V=64, max_seq=32, seed=0)
MICRO_L = 3


@pytest.fixture
def micro_config():
    return BackboneConfig(**MICRO)


@pytest.fixture
def backbone(micro_config):
    return init_backbone(micro_config)


@pytest.fixture
def micro_dims(micro_config):
    return AdapterDims.for_backbone(micro_config, l=MICRO_L, K=3)


@pytest.fixture(scope='session')
def synth():
    return gen_synth(SynthSpec(K=3, seed=0, V=MICRO['V']), 60, 24)


@pytest.fixture
def labels(synth):
    return synth.label_set()


@pytest.fixture
def synth_dir(tmp_path, synth):
    from ltuning.data import write_synth_files
    return write_synth_files(synth, tmp_path / 'synth')


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
