"""
Trainable adapters on top of the frozen backbone.

    lt-prefix   score label states (w_phi), pool, map to per-layer
                key/values (W_psi), classify entail/not-entail (W_zeta)
    lt-prompt   transform label states (W_gamma) into input rows placed
                before the text, classify entail/not-entail (W_zeta)
    prefix      free per-layer key/values, K-way head
    prompt      free soft-prompt rows, K-way head

The label-conditioned adapters split their forward in two: `condition()`
turns a stack of K padded labels into per-label conditioning (prefixes or
prompt rows), `classify()` scores a batch of texts against a chosen label
for each. Training conditions once per step; evaluation caches it.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Type

import numpy as np

from .backbone import EMBED_SCALE, PAD_ID, UNK_ID, Backbone, BackboneConfig, PastKeyValues, backbone_param_count
from .errors import AdapterError, ShapeError, WeightFormatError
from .fileio import PathLike
from .numerics import (
    Tensor, concat_rows, matmul, repeat_batch, reshape, softmax_lastdim, take, transpose,
)
from .weights import read_weight_file, write_weight_file

logger = logging.getLogger(__name__)

METHODS = ('lt-prefix', 'lt-prompt', 'prefix', 'prompt')
NLI_METHODS = ('lt-prefix', 'lt-prompt')
BASELINE_METHODS = ('prefix', 'prompt')
POOLING_MODES = ('weights', 'sum')
READOUTS = ('last', 'mean')
# Prefix keys/values and pooling scores start at the scale of the backbone's own
# activations (unit per coordinate); soft prompt rows at the token-table scale.
ACTIVATION_SCALE = 1.0


@dataclass(frozen=True)
class AdapterDims:
    """Shapes an adapter needs. p_len=None picks the method's default."""
    d: int
    m: int
    H: int
    l: int
    K: int = 2
    p_len: Optional[int] = None
    pooling_mode: str = 'weights'
    readout: str = 'last'

    def validate(self, method: str) -> 'AdapterDims':
        if method not in METHODS:
            raise AdapterError(f"unknown method '{method}', expected one of {', '.join(METHODS)}")
        for name in ('d', 'm', 'H', 'l', 'K'):
            if getattr(self, name) <= 0:
                raise AdapterError(f"adapter dimension {name} must be positive")
        if self.d % self.H:
            raise AdapterError(f"d={self.d} is not divisible by H={self.H}")
        if self.pooling_mode not in POOLING_MODES:
            raise AdapterError(f"pooling_mode must be one of {POOLING_MODES}, got '{self.pooling_mode}'")
        if self.readout not in READOUTS:
            raise AdapterError(f"readout must be one of {READOUTS}, got '{self.readout}'")
        if self.p_len is not None and self.p_len < 0:
            raise AdapterError("p_len must be non-negative")
        if method == 'lt-prefix' and self.pooling_mode == 'weights' and self.p_len not in (None, 1):
            raise AdapterError(f"weights pooling produces exactly one prefix slot, got p_len={self.p_len}")
        if method == 'lt-prefix' and self.pooling_mode == 'sum' and self.p_len == 0:
            raise AdapterError("sum pooling needs p_len >= 1")
        return self

    def prefix_len(self, method: str) -> int:
        if method == 'lt-prefix':
            if self.pooling_mode == 'weights':
                return 1
            return self.l if self.p_len is None else self.p_len
        if method == 'prefix':
            return self.l if self.p_len is None else self.p_len
        return 0

    @property
    def head_dim(self) -> int:
        return self.d // self.H

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'AdapterDims':
        fields = ('d', 'm', 'H', 'l', 'K', 'p_len', 'pooling_mode', 'readout')
        return cls(**{k: data[k] for k in fields if k in data})

    @classmethod
    def for_backbone(cls, cfg: BackboneConfig, l: int, K: int, **kwargs) -> 'AdapterDims':
        return cls(d=cfg.d, m=cfg.m, H=cfg.H, l=l, K=K, **kwargs)


# Shared plumbing

def pad_batch(texts: Sequence[Sequence[int]], pad_id: int = PAD_ID) -> Tuple[List[List[int]], np.ndarray]:
    """Right-pad id lists to a common length; an empty text becomes one <unk>."""
    seqs = [list(t) if len(t) else [UNK_ID] for t in texts]
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    width = int(lengths.max()) if len(seqs) else 0
    return [s + [pad_id] * (width - len(s)) for s in seqs], lengths


def readout(hs: Tensor, start: int, lengths: np.ndarray, mode: str = 'last') -> Tensor:
    """
    Pick one row per batch item from hs [B, N, d]: the last real text row
    (start + length - 1), or the mean of rows start .. start + length - 1.
    """
    batch, width = hs.shape[0], hs.shape[1]
    last = start + lengths - 1
    if mode == 'last':
        return take(hs, (np.arange(batch), last))
    pos = np.arange(width)[None, :]
    inside = (pos >= start) & (pos <= last[:, None])
    weights = inside / inside.sum(axis=1, keepdims=True)
    w = Tensor(weights.reshape(batch, 1, width), dtype=hs.dtype)
    return reshape(matmul(w, hs), (batch, hs.shape[-1]))


def label_pad_mask(label_ids: Sequence[int]) -> List[bool]:
    return [i == PAD_ID for i in label_ids]


def attention_pool(h: Tensor, w: Tensor, pad_mask) -> Tuple[Tensor, Tensor]:
    """
    Score rows of h [.., l, d] with w [d], softmax over unpadded rows, and
    return (alpha [.., l], pooled [.., d]).
    """
    mask = np.asarray(pad_mask, dtype=bool)
    if h.shape[-1] != w.shape[0]:
        raise ShapeError("pooling vector width differs from hidden states", h.shape, w.shape)
    if mask.shape != h.shape[:-1]:
        raise ShapeError("pad mask does not cover the label rows", mask.shape, h.shape[:-1])
    if mask.all(axis=-1).any():
        raise AdapterError("cannot pool a label whose positions are all padding")
    lead, l, d = h.shape[:-2], h.shape[-2], h.shape[-1]
    alpha = softmax_lastdim(matmul(h, w), mask)
    pooled = reshape(matmul(reshape(alpha, lead + (1, l)), h), lead + (d,))
    return alpha, pooled


# Adapters

class Adapter:
    method = ''

    def __init__(self, dims: AdapterDims, params: Dict[str, Tensor]):
        self.dims = dims.validate(self.method)
        expected = self.param_shapes(self.dims)
        if set(params) != set(expected):
            raise AdapterError(f"{self.method} expects parameters {sorted(expected)}, got {sorted(params)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"{self.method} parameter '{name}'", params[name].shape, shape)
            params[name].requires_grad = True
            params[name].name = name
        self.params = params

    @classmethod
    def param_shapes(cls, dims: AdapterDims) -> Dict[str, Tuple[int, ...]]:
        raise NotImplementedError

    @classmethod
    def initial_values(cls, dims: AdapterDims, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        raise NotImplementedError

    @property
    def p_len(self) -> int:
        return self.dims.prefix_len(self.method)

    @property
    def is_nli(self) -> bool:
        return self.method in NLI_METHODS

    def parameters(self) -> Dict[str, Tensor]:
        return {name: p for name, p in self.params.items() if p.requires_grad}

    def trainable_count(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def snapshot(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}


class LTPrefixAdapter(Adapter):
    method = 'lt-prefix'

    @classmethod
    def param_shapes(cls, dims):
        p = dims.prefix_len(cls.method)
        in_dim = dims.l if dims.pooling_mode == 'weights' else dims.d
        return {
            'phi.score': (dims.d,),
            'psi.transform': (in_dim, 2 * dims.m * p * dims.d),
            'zeta.head': (dims.d, 2),
        }

    @classmethod
    def initial_values(cls, dims, rng):
        shapes = cls.param_shapes(dims)
        # alpha sums to 1; a pooled row has norm about sqrt(d)
        psi_scale = ACTIVATION_SCALE if dims.pooling_mode == 'weights' else ACTIVATION_SCALE / np.sqrt(dims.d)
        return {
            'phi.score': rng.standard_normal(shapes['phi.score']) / np.sqrt(dims.d),
            'psi.transform': psi_scale * rng.standard_normal(shapes['psi.transform']),
            'zeta.head': np.zeros(shapes['zeta.head']),
        }

    def condition(self, backbone: Backbone, label_ids, pad_masks) -> PastKeyValues:
        """Prefixes for a stack of K padded labels; keys are [K, H, p, hd]."""
        h = backbone.encode(label_ids)
        return build_prefix(self, h, pad_masks)

    def classify(self, backbone: Backbone, pkv: PastKeyValues, label_index: Sequence[int],
                 texts: Sequence[Sequence[int]]) -> Tensor:
        ids, lengths = pad_batch(texts)
        hs = backbone.encode_with_prefix(ids, pkv.select(label_index))
        return matmul(readout(hs, 0, lengths, self.dims.readout), self.params['zeta.head'])


class LTPromptAdapter(Adapter):
    method = 'lt-prompt'

    @classmethod
    def param_shapes(cls, dims):
        return {'gamma.transform': (dims.d, dims.d), 'zeta.head': (dims.d, 2)}

    @classmethod
    def initial_values(cls, dims, rng):
        return {'gamma.transform': np.eye(dims.d), 'zeta.head': np.zeros((dims.d, 2))}

    def condition(self, backbone: Backbone, label_ids, pad_masks=None) -> Tensor:
        """Label embedding rows e_y = encode(label) . W_gamma, shape [K, l, d]."""
        return matmul(backbone.encode(label_ids), self.params['gamma.transform'])

    def classify(self, backbone: Backbone, label_rows: Tensor, label_index: Sequence[int],
                 texts: Sequence[Sequence[int]]) -> Tensor:
        ids, lengths = pad_batch(texts)
        e_y = take(label_rows, (np.asarray(label_index, dtype=np.int64),))
        hs = backbone.forward_from_embeddings(concat_rows(e_y, backbone.embed(ids)))
        start = label_rows.shape[-2]
        return matmul(readout(hs, start, lengths, self.dims.readout), self.params['zeta.head'])


class BaselinePromptAdapter(Adapter):
    method = 'prompt'

    @classmethod
    def param_shapes(cls, dims):
        return {'prompt.table': (dims.l, dims.d), 'head': (dims.d, dims.K)}

    @classmethod
    def initial_values(cls, dims, rng):
        return {
            'prompt.table': EMBED_SCALE * rng.standard_normal((dims.l, dims.d)),
            'head': np.zeros((dims.d, dims.K)),
        }

    def classify(self, backbone: Backbone, texts: Sequence[Sequence[int]]) -> Tensor:
        ids, lengths = pad_batch(texts)
        prompt = repeat_batch(self.params['prompt.table'], len(ids))
        hs = backbone.forward_from_embeddings(concat_rows(prompt, backbone.embed(ids)))
        return matmul(readout(hs, self.dims.l, lengths, self.dims.readout), self.params['head'])


class BaselinePrefixAdapter(Adapter):
    method = 'prefix'

    @classmethod
    def param_shapes(cls, dims):
        p = dims.prefix_len(cls.method)
        return {'prefix.table': (dims.m, 2, p, dims.d), 'head': (dims.d, dims.K)}

    @classmethod
    def initial_values(cls, dims, rng):
        shapes = cls.param_shapes(dims)
        return {
            'prefix.table': ACTIVATION_SCALE * rng.standard_normal(shapes['prefix.table']),
            'head': np.zeros(shapes['head']),
        }

    def past_key_values(self, batch: int) -> PastKeyValues:
        dims, p = self.dims, self.p_len
        table = reshape(self.params['prefix.table'], (dims.m, 2, p, dims.H, dims.head_dim))
        table = transpose(table, (0, 1, 3, 2, 4))
        return PastKeyValues([
            (repeat_batch(take(table, (i, 0)), batch), repeat_batch(take(table, (i, 1)), batch))
            for i in range(dims.m)
        ])

    def classify(self, backbone: Backbone, texts: Sequence[Sequence[int]]) -> Tensor:
        ids, lengths = pad_batch(texts)
        hs = backbone.encode_with_prefix(ids, self.past_key_values(len(ids)))
        return matmul(readout(hs, 0, lengths, self.dims.readout), self.params['head'])


ADAPTER_CLASSES: Dict[str, Type[Adapter]] = {
    'lt-prefix': LTPrefixAdapter,
    'lt-prompt': LTPromptAdapter,
    'prefix': BaselinePrefixAdapter,
    'prompt': BaselinePromptAdapter,
}


def build_adapter(method: str, dims: AdapterDims, seed: int = 0) -> Adapter:
    """Fresh adapter: small random transforms, zero classification heads."""
    dims.validate(method)
    cls = ADAPTER_CLASSES[method]
    rng = np.random.default_rng(seed)
    values = cls.initial_values(dims, rng)
    return cls(dims, {name: Tensor(arr) for name, arr in values.items()})


def randomize(adapter: Adapter, seed: int = 0, scale: float = 0.5) -> Adapter:
    """Overwrite every parameter with scale * N(0, 1); used by gradient checks."""
    rng = np.random.default_rng(seed)
    for name in sorted(adapter.params):
        p = adapter.params[name]
        p.data = (scale * rng.standard_normal(p.shape)).astype(p.dtype)
        p.grad = None
    return adapter


def build_prefix(a: LTPrefixAdapter, h_label: Tensor, pad_mask) -> PastKeyValues:
    """
    Pool label states and map them to per-layer prefixes. Keys and values
    come out as [.., H, p_len, head_dim], keeping any leading label axis.
    """
    dims = a.dims
    alpha, pooled = attention_pool(h_label, a.params['phi.score'], pad_mask)
    transform = a.params['psi.transform']
    if dims.pooling_mode == 'weights':
        if transform.shape[0] != h_label.shape[-2]:
            raise AdapterError(f"weights pooling expects {transform.shape[0]} label rows, got {h_label.shape[-2]}")
        z = matmul(alpha, transform)
    else:
        z = matmul(pooled, transform)

    lead = h_label.shape[:-2]
    b = len(lead)
    z = reshape(z, lead + (dims.m, 2, a.p_len, dims.H, dims.head_dim))
    z = transpose(z, (b, b + 1) + tuple(range(b)) + (b + 3, b + 2, b + 4))
    return PastKeyValues([(take(z, (i, 0)), take(z, (i, 1))) for i in range(dims.m)])


# Single-example forwards

def prefix_forward(b: Backbone, a: LTPrefixAdapter, label_ids: Sequence[int], text_ids: Sequence[int],
                   pad_mask=None) -> Tensor:
    mask = label_pad_mask(label_ids) if pad_mask is None else pad_mask
    pkv = a.condition(b, [list(label_ids)], [list(mask)])
    return take(a.classify(b, pkv, [0], [text_ids]), 0)


def prompt_forward(b: Backbone, a: LTPromptAdapter, label_ids: Sequence[int], text_ids: Sequence[int]) -> Tensor:
    rows = a.condition(b, [list(label_ids)])
    return take(a.classify(b, rows, [0], [text_ids]), 0)


def baseline_prompt_forward(b: Backbone, a: BaselinePromptAdapter, text_ids: Sequence[int]) -> Tensor:
    return take(a.classify(b, [text_ids]), 0)


def baseline_prefix_forward(b: Backbone, a: BaselinePrefixAdapter, text_ids: Sequence[int]) -> Tensor:
    return take(a.classify(b, [text_ids]), 0)


# Parameter audit

def expected_params(method: str, dims: AdapterDims) -> Tuple[int, str]:
    d, l, m, K = dims.d, dims.l, dims.m, dims.K
    p = dims.prefix_len(method)
    if method == 'lt-prefix' and dims.pooling_mode == 'weights':
        return 2 * l * m * d + 3 * d, '2*l*m*d + 3*d'
    if method == 'lt-prefix':
        return 2 * p * m * d * d + 3 * d, '2*p_len*m*d^2 + 3*d'
    if method == 'lt-prompt':
        return d * (d + 2), 'd*(d+2)'
    if method == 'prompt':
        return d * (l + K), 'd*(l+K)'
    if method == 'prefix':
        return 2 * m * p * d + d * K, '2*m*p_len*d + d*K'
    raise AdapterError(f"unknown method '{method}'")


def audit_params(method: str, dims: AdapterDims, backbone_config: Optional[BackboneConfig] = None) -> dict:
    """Closed-form trainable count against the count of an instantiated adapter."""
    dims.validate(method)
    expected, formula = expected_params(method, dims)
    actual = build_adapter(method, dims).trainable_count()
    report = {
        'method': method,
        'expected': expected,
        'actual': actual,
        'formula': formula,
        'match': expected == actual,
    }
    if backbone_config is not None:
        frozen = backbone_param_count(backbone_config)
        report['backbone_params'] = frozen
        report['trainable_percent'] = round(100.0 * actual / (frozen + actual), 6)
    if not report['match']:
        logger.warning(f"[AUDIT] {method}: expected {expected} ({formula}) but adapter has {actual}")
    return report


# Persistence

def save_adapter(a: Adapter, path: PathLike) -> Path:
    tensors = {name: a.params[name].data for name in a.param_shapes(a.dims)}
    return write_weight_file(path, tensors, a.dims.to_dict(), {'kind': 'adapter', 'method': a.method})


def load_adapter(path: PathLike) -> Adapter:
    wf = read_weight_file(path)
    method = wf.extras.get('method')
    if method not in ADAPTER_CLASSES:
        raise WeightFormatError(f"{path}: header method {method!r} is not an adapter method")
    try:
        dims = AdapterDims.from_dict(wf.config)
        return ADAPTER_CLASSES[method](dims, {name: Tensor(arr) for name, arr in wf.tensors.items()})
    except (TypeError, ValueError) as e:
        raise WeightFormatError(f"{path}: adapter tensors do not match header dims: {e}") from None
