"""
Frozen toy backbone: a deterministic decoder-only pre-norm transformer, its
tokenizer, and LTW1 persistence.

Forwards accept either a single sequence ([n, d] hidden states) or a batch
of equal-length, right-padded sequences ([B, n, d]). Attention is causal, so
trailing pads never change the rows before them.
"""

from __future__ import annotations

import hashlib
import logging
import math
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    BackboneConfigError, DataError, SequenceLengthError, ShapeError, VocabularyError, WeightFormatError,
)
from .fileio import PathLike, read_lines, write_lines
from .numerics import (
    Tensor, add, concat, embedding_gather, gelu, layer_norm, matmul, reshape, scale,
    softmax_lastdim, take, transpose,
)
from .weights import read_weight_file, write_weight_file

logger = logging.getLogger(__name__)

PAD_TOKEN = '<pad>'
UNK_TOKEN = '<unk>'
PAD_ID = 0
UNK_ID = 1

EMBED_SCALE = 0.02
GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)
PARAM_FORMULA = 'V*d + max_seq*d + m*(12*d^2 + 13*d) + 2*d'


@dataclass(frozen=True)
class BackboneConfig:
    d: int = 64
    m: int = 4
    H: int = 4
    V: int = 512
    max_seq: int = 128
    seed: int = 0

    def validate(self) -> 'BackboneConfig':
        for name in ('d', 'm', 'H', 'V', 'max_seq'):
            value = getattr(self, name)
            if not isinstance(value, int) or value <= 0:
                raise BackboneConfigError(f"backbone.{name} must be a positive integer, got {value!r}")
        if self.d % self.H:
            raise BackboneConfigError(f"backbone.d={self.d} is not divisible by H={self.H}")
        if self.V < 2:
            raise BackboneConfigError("backbone.V must leave room for <pad> and <unk>")
        if not 0 <= self.seed < 2 ** 64:
            raise BackboneConfigError(f"backbone.seed must fit in 64 bits, got {self.seed}")
        return self

    @property
    def head_dim(self) -> int:
        return self.d // self.H

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> 'BackboneConfig':
        known = {k: int(data[k]) for k in ('d', 'm', 'H', 'V', 'max_seq', 'seed') if k in data}
        return cls(**known).validate()


def backbone_param_count(cfg: BackboneConfig) -> int:
    d = cfg.d
    return cfg.V * d + cfg.max_seq * d + cfg.m * (12 * d * d + 13 * d) + 2 * d


# Initialization

def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def splitmix64_stream(seed: int, key: int, count: int) -> np.ndarray:
    """`count` 64-bit words from a splitmix64 counter stream keyed by (seed, key)."""
    with np.errstate(over='ignore'):
        base = _mix64(np.array([seed ^ (key << 32)], dtype=np.uint64) + GOLDEN_GAMMA)[0]
        counters = base + GOLDEN_GAMMA * np.arange(1, count + 1, dtype=np.uint64)
        return _mix64(counters)


def seeded_normal(seed: int, name: str, shape: Sequence[int]) -> np.ndarray:
    """Standard normals via Box-Muller over a per-tensor splitmix64 stream."""
    count = int(np.prod(shape, dtype=np.int64))
    words = splitmix64_stream(seed, zlib.crc32(name.encode('utf-8')), 2 * count)
    uniform = ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    u1, u2 = uniform[:count], uniform[count:]
    z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * math.pi * u2)
    return z.reshape(tuple(shape))


def parameter_shapes(cfg: BackboneConfig) -> List[Tuple[str, Tuple[int, ...], str]]:
    """(name, shape, init) in storage order; init is 'embedding', 'projection', 'ones' or 'zeros'."""
    d = cfg.d
    shapes = [
        ('embed.tokens', (cfg.V, d), 'embedding'),
        ('embed.positions', (cfg.max_seq, d), 'embedding'),
    ]
    for i in range(cfg.m):
        p = f"layers.{i}"
        shapes += [
            (f"{p}.ln1.gain", (d,), 'ones'),
            (f"{p}.ln1.bias", (d,), 'zeros'),
            (f"{p}.attn.qkv.weight", (d, 3 * d), 'projection'),
            (f"{p}.attn.qkv.bias", (3 * d,), 'zeros'),
            (f"{p}.attn.out.weight", (d, d), 'projection'),
            (f"{p}.attn.out.bias", (d,), 'zeros'),
            (f"{p}.ln2.gain", (d,), 'ones'),
            (f"{p}.ln2.bias", (d,), 'zeros'),
            (f"{p}.mlp.fc.weight", (d, 4 * d), 'projection'),
            (f"{p}.mlp.fc.bias", (4 * d,), 'zeros'),
            (f"{p}.mlp.proj.weight", (4 * d, d), 'projection'),
            (f"{p}.mlp.proj.bias", (d,), 'zeros'),
        ]
    shapes += [
        ('final_ln.gain', (d,), 'ones'),
        ('final_ln.bias', (d,), 'zeros'),
    ]
    return shapes


# Prefix key/values

@dataclass
class PastKeyValues:
    """
    Per-layer (key, value) pairs shaped [.., H, p_len, head_dim]. A leading
    axis, when present, indexes batch items (or labels, before selection).
    """
    layers: List[Tuple[Tensor, Tensor]]

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("PastKeyValues needs at least one layer")
        ref = self.layers[0][0].shape
        for key, value in self.layers:
            if key.shape != ref or value.shape != ref:
                raise ShapeError("all prefix keys/values must share one shape", ref, key.shape, value.shape)

    @property
    def p_len(self) -> int:
        return self.layers[0][0].shape[-2]

    @property
    def batched(self) -> bool:
        return self.layers[0][0].ndim == 4

    def select(self, indices: Sequence[int]) -> 'PastKeyValues':
        """Gather leading-axis entries, e.g. one label's prefix per batch item."""
        idx = (np.asarray(indices, dtype=np.int64),)
        return PastKeyValues([(take(k, idx), take(v, idx)) for k, v in self.layers])

    @classmethod
    def empty(cls, cfg: BackboneConfig) -> 'PastKeyValues':
        z = np.zeros((cfg.H, 0, cfg.head_dim), dtype=np.float32)
        return cls([(Tensor(z), Tensor(z)) for _ in range(cfg.m)])


# Tokenizer

class Tokenizer:
    """Lowercased whitespace tokenizer over a fixed vocabulary; line index = id."""

    def __init__(self, vocabulary: Sequence[str]):
        vocab = list(vocabulary)
        if len(vocab) < 2 or vocab[PAD_ID] != PAD_TOKEN or vocab[UNK_ID] != UNK_TOKEN:
            raise DataError(f"vocabulary must start with {PAD_TOKEN!r}, {UNK_TOKEN!r}")
        self.vocabulary = vocab
        self._ids = {}
        for i, word in enumerate(vocab):
            if word in self._ids:
                raise DataError(f"duplicate vocabulary entry {word!r} at line {i}")
            self._ids[word] = i
        self.pad_id = PAD_ID
        self.unk_id = UNK_ID

    def __len__(self) -> int:
        return len(self.vocabulary)

    @classmethod
    def build(cls, words: Sequence[str]) -> 'Tokenizer':
        vocab = [PAD_TOKEN, UNK_TOKEN]
        seen = set(vocab)
        for w in words:
            w = w.lower()
            if w not in seen:
                seen.add(w)
                vocab.append(w)
        return cls(vocab)

    @classmethod
    def from_file(cls, path: PathLike) -> 'Tokenizer':
        return cls(read_lines(path))

    def to_file(self, path: PathLike) -> Path:
        return write_lines(path, self.vocabulary)

    def encode(self, text: str) -> List[int]:
        return [self._ids.get(w, self.unk_id) for w in text.lower().split()]

    def decode(self, ids: Sequence[int]) -> str:
        out = []
        for i in ids:
            if not 0 <= i < len(self.vocabulary):
                raise VocabularyError(int(i), len(self.vocabulary))
            out.append(self.vocabulary[i])
        return ' '.join(out)

    def id_of(self, word: str) -> int:
        return self._ids.get(word.lower(), self.unk_id)


def tokenize(t: Tokenizer, text: str) -> List[int]:
    return t.encode(text)


# Model

def _swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


class Backbone:
    def __init__(self, config: BackboneConfig, params: Dict[str, Tensor], frozen: bool = True):
        self.config = config.validate()
        expected = {name: shape for name, shape, _ in parameter_shapes(config)}
        if set(params) != set(expected):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ShapeError(f"backbone parameters do not match config (missing {missing}, unexpected {extra})")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ShapeError(f"backbone parameter '{name}'", params[name].shape, shape)
        self.params = params
        self.frozen = False
        if frozen:
            self.freeze()

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        self.frozen = True

    def parameters(self) -> Dict[str, Tensor]:
        return self.params

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name].data, dtype='<f4')
            h.update(name.encode('utf-8'))
            h.update(repr(arr.shape).encode('ascii'))
            h.update(arr.tobytes())
        return h.hexdigest()

    def embed(self, ids) -> Tensor:
        """Raw token-table rows (no positions) for a list or a batch of lists."""
        return embedding_gather(self.params['embed.tokens'], ids)

    def encode(self, ids) -> Tensor:
        return self.forward_from_embeddings(self.embed(ids))

    def encode_with_prefix(self, ids, pkv: PastKeyValues) -> Tensor:
        return self.forward_from_embeddings(self.embed(ids), pkv)

    def forward_from_embeddings(self, e: Tensor, past: Optional[PastKeyValues] = None) -> Tensor:
        cfg = self.config
        if e.ndim not in (2, 3) or e.shape[-1] != cfg.d:
            raise ShapeError(f"embeddings must be [n, {cfg.d}] or [B, n, {cfg.d}]", e.shape)
        n = e.shape[-2]
        if n == 0:
            raise SequenceLengthError("cannot encode an empty sequence")

        p = 0
        if past is not None:
            if len(past.layers) != cfg.m:
                raise ShapeError(f"prefix has {len(past.layers)} layers, backbone has {cfg.m}")
            expect = (cfg.H, past.p_len, cfg.head_dim)
            if past.layers[0][0].shape[-3:] != expect:
                raise ShapeError("prefix key shape", past.layers[0][0].shape, expect)
            if past.batched != (e.ndim == 3) or (past.batched and past.layers[0][0].shape[0] != e.shape[0]):
                raise ShapeError("prefix batch axis does not match embeddings", past.layers[0][0].shape, e.shape)
            p = past.p_len
        if n + p > cfg.max_seq:
            raise SequenceLengthError(f"sequence of {n} tokens plus {p} prefix slots exceeds max_seq={cfg.max_seq}")

        x = add(e, take(self.params['embed.positions'], slice(p, p + n)))
        # blocked[i, j]: query i may not see key j (prefix slots are always visible)
        key_pos = np.arange(p + n) - p
        blocked = key_pos[None, :] > np.arange(n)[:, None]

        H, hd = cfg.H, cfg.head_dim
        lead = x.shape[:-2]
        for i in range(cfg.m):
            w = f"layers.{i}"
            h = layer_norm(x, self.params[f"{w}.ln1.gain"], self.params[f"{w}.ln1.bias"])
            qkv = add(matmul(h, self.params[f"{w}.attn.qkv.weight"]), self.params[f"{w}.attn.qkv.bias"])
            qkv = reshape(qkv, lead + (n, 3, H, hd))
            b = len(lead)
            qkv = transpose(qkv, (b + 1,) + tuple(range(b)) + (b + 2, b, b + 3))
            q, k, v = take(qkv, 0), take(qkv, 1), take(qkv, 2)
            if p:
                pk, pv = past.layers[i]
                k = concat((pk, k), axis=-2)
                v = concat((pv, v), axis=-2)
            scores = scale(matmul(q, _swap_last(k)), 1.0 / math.sqrt(hd))
            ctx = matmul(softmax_lastdim(scores, blocked), v)
            ctx = reshape(transpose(ctx, tuple(range(b)) + (b + 1, b, b + 2)), lead + (n, cfg.d))
            x = add(x, add(matmul(ctx, self.params[f"{w}.attn.out.weight"]), self.params[f"{w}.attn.out.bias"]))

            h = layer_norm(x, self.params[f"{w}.ln2.gain"], self.params[f"{w}.ln2.bias"])
            h = gelu(add(matmul(h, self.params[f"{w}.mlp.fc.weight"]), self.params[f"{w}.mlp.fc.bias"]))
            x = add(x, add(matmul(h, self.params[f"{w}.mlp.proj.weight"]), self.params[f"{w}.mlp.proj.bias"]))

        return layer_norm(x, self.params['final_ln.gain'], self.params['final_ln.bias'])


def init_backbone(config: BackboneConfig) -> Backbone:
    """
    Seeded weights: embedding tables at EMBED_SCALE, projections N(0, 1/fan_in)
    so queries, keys and values come out near unit scale per coordinate,
    layer norms at gain 1 and bias 0.
    """
    config.validate()
    params = {}
    for name, shape, kind in parameter_shapes(config):
        if kind == 'embedding':
            data = EMBED_SCALE * seeded_normal(config.seed, name, shape)
        elif kind == 'projection':
            data = seeded_normal(config.seed, name, shape) / math.sqrt(shape[0])
        elif kind == 'ones':
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, name=name)
    backbone = Backbone(config, params)
    logger.info(f"[INIT] backbone d={config.d} m={config.m} H={config.H} V={config.V} "
                f"seed={config.seed}: {backbone.parameter_count()} parameters")
    return backbone


def save_weights(b: Backbone, path: PathLike) -> Path:
    tensors = {name: b.params[name].data for name, _, _ in parameter_shapes(b.config)}
    extras = {
        'kind': 'backbone',
        'param_count': b.parameter_count(),
        'param_formula': PARAM_FORMULA,
        'checksum': b.checksum(),
    }
    return write_weight_file(path, tensors, b.config.to_dict(), extras)


def load_weights(path: PathLike) -> Backbone:
    wf = read_weight_file(path)
    try:
        cfg = BackboneConfig.from_dict(wf.config)
    except (TypeError, ValueError, KeyError) as e:
        raise WeightFormatError(f"backbone config in header is invalid: {e}") from None
    params = {name: Tensor(arr, name=name) for name, arr in wf.tensors.items()}
    try:
        return Backbone(cfg, params)
    except ShapeError as e:
        raise WeightFormatError(str(e)) from None
