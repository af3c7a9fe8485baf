"""
Training loops.

Label-conditioned methods train on NLI batches: b/2 texts paired with their
true label (target 1) and b/2 paired with a uniformly drawn false label
(target 0), scored with binary cross-entropy. Baselines train a K-way head
with softmax cross-entropy. Only adapter parameters are updated; the
backbone checksum is verified after every run.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .adapters import (
    Adapter, AdapterDims, BASELINE_METHODS, METHODS, NLI_METHODS, build_adapter, label_pad_mask, randomize,
)
from .backbone import PAD_ID, UNK_ID, Backbone
from .errors import ConfigError, DataError, TrainingDivergedError, TrainingError
from .evaluation import (
    LabelCache, LabelSet, class_scores, entailment_probability, score_logits, softmax_probs,
)
from .numerics import (
    AdamState, GradCheckReport, Tape, Tensor, adam_step, bce_with_logits, cross_entropy_with_logits,
    finite_diff_check, sgd_step,
)

logger = logging.getLogger(__name__)

OPTIMIZERS = ('adam', 'sgd')


@dataclass(frozen=True)
class Example:
    text: str
    label_index: int


@dataclass(frozen=True)
class NliItem:
    text_ids: Tuple[int, ...]
    label_ids: Tuple[int, ...]
    target: int
    label_index: int = -1


@dataclass
class NliBatch:
    items: List[NliItem]

    @property
    def size(self) -> int:
        return len(self.items)

    @property
    def positives(self) -> int:
        return sum(item.target for item in self.items)

    @property
    def negatives(self) -> int:
        return self.size - self.positives

    @property
    def targets(self) -> List[int]:
        return [item.target for item in self.items]


@dataclass
class TrainConfig:
    steps: int = 500
    batch: int = 32
    lr: float = 1e-3
    seed: int = 0
    method: str = 'lt-prompt'
    eval_every: int = 10
    loss_threshold: float = 0.3
    optimizer: str = 'adam'
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    val_seed: int = 0

    def validate(self) -> 'TrainConfig':
        if self.steps < 1:
            raise ConfigError(f"train.steps must be at least 1, got {self.steps}")
        if self.batch < 2 or self.batch % 2:
            raise ConfigError(
                f"train.batch must be even and >= 2 (half positives, half negatives), got {self.batch}")
        if self.lr <= 0:
            raise ConfigError(f"train.lr must be positive, got {self.lr}")
        if self.eval_every < 1:
            raise ConfigError(f"train.eval_every must be at least 1, got {self.eval_every}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method '{self.method}', expected one of {', '.join(METHODS)}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"train.optimizer must be one of {OPTIMIZERS}, got '{self.optimizer}'")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MetricRecord:
    step: int
    split: str
    loss: float
    accuracy: float


@dataclass
class TrainResult:
    adapter: Adapter
    records: List[MetricRecord] = field(default_factory=list)

    @property
    def train_losses(self) -> List[float]:
        return [r.loss for r in self.records if r.split == 'train']

    def val_records(self) -> List[MetricRecord]:
        return [r for r in self.records if r.split == 'val']


# Batches

def build_nli_batch(data: Sequence[Example], labels: LabelSet, b: int, rng: np.random.Generator) -> NliBatch:
    """
    b/2 positives (true label, target 1) and b/2 negatives (uniform false
    label, target 0), sampled with replacement and shuffled.
    """
    if b < 2 or b % 2:
        raise ConfigError(f"batch size must be even and >= 2, got {b}")
    K = labels.K
    if K < 2:
        raise ConfigError(f"NLI batches need K >= 2 labels, got {K}")
    if not data:
        raise DataError("cannot build a batch from an empty dataset")

    half = b // 2
    tok = labels.tokenizer
    items = []
    for i in rng.integers(0, len(data), size=half):
        ex = data[int(i)]
        items.append(NliItem(tuple(tok.encode(ex.text)), tuple(labels.ids[ex.label_index]), 1, ex.label_index))
    for i in rng.integers(0, len(data), size=half):
        ex = data[int(i)]
        false = int(rng.integers(0, K - 1))
        if false >= ex.label_index:
            false += 1
        items.append(NliItem(tuple(tok.encode(ex.text)), tuple(labels.ids[false]), 0, false))
    order = rng.permutation(b)
    return NliBatch([items[int(j)] for j in order])


def sample_examples(data: Sequence[Example], b: int, rng: np.random.Generator) -> List[Example]:
    if not data:
        raise DataError("cannot build a batch from an empty dataset")
    return [data[int(i)] for i in rng.integers(0, len(data), size=b)]


# Losses

def batch_logits(b: Backbone, adapter: Adapter, batch: NliBatch) -> Tensor:
    """[b, 2] logits; each distinct label in the batch is conditioned once."""
    if not adapter.is_nli:
        raise TrainingError(f"NLI batches need one of {NLI_METHODS}, got '{adapter.method}'")
    distinct: Dict[Tuple[int, ...], int] = {}
    for item in batch.items:
        distinct.setdefault(item.label_ids, len(distinct))
    label_ids = [list(ids) for ids in distinct]
    cond = adapter.condition(b, label_ids, [label_pad_mask(ids) for ids in label_ids])
    index = [distinct[item.label_ids] for item in batch.items]
    return adapter.classify(b, cond, index, [list(item.text_ids) for item in batch.items])


def batch_loss(b: Backbone, adapter: Adapter, batch: NliBatch) -> Tensor:
    """Mean binary cross-entropy over the batch."""
    return bce_with_logits(batch_logits(b, adapter, batch), batch.targets)


def baseline_loss(b: Backbone, adapter: Adapter, examples: Sequence[Example], tokenizer) -> Tuple[Tensor, Tensor]:
    logits = adapter.classify(b, [tokenizer.encode(ex.text) for ex in examples])
    return cross_entropy_with_logits(logits, [ex.label_index for ex in examples]), logits


# Validation

def nli_validation_pairs(val: Sequence[Example], K: int, seed: int) -> List[int]:
    """One fixed false label per validation example."""
    rng = np.random.default_rng(seed)
    out = []
    for ex in val:
        false = int(rng.integers(0, K - 1))
        out.append(false + 1 if false >= ex.label_index else false)
    return out


def _nll_numpy(logits: np.ndarray, targets: np.ndarray) -> float:
    z = logits - logits.max(axis=-1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return float(-log_probs[np.arange(len(targets)), targets].mean())


def validate(b: Backbone, adapter: Adapter, val: Sequence[Example], labels: LabelSet,
             negatives: Optional[List[int]] = None) -> Tuple[float, float]:
    """
    (loss, accuracy) on the validation split. NLI loss is BCE over each
    example's true pair and its fixed negative pair; baseline loss is K-way
    cross-entropy. Accuracy is argmax over the K labels either way.
    """
    texts = [labels.tokenizer.encode(ex.text) for ex in val]
    golds = np.array([ex.label_index for ex in val], dtype=np.int64)
    if adapter.is_nli:
        logits = score_logits(b, adapter, texts, labels, LabelCache(b, adapter, labels))
        negatives = negatives if negatives is not None else nli_validation_pairs(val, labels.K, 0)
        rows = np.arange(len(val))
        pair_logits = np.concatenate([logits[rows, golds], logits[rows, np.asarray(negatives)]], axis=0)
        pair_targets = np.concatenate([np.ones(len(val), dtype=np.int64), np.zeros(len(val), dtype=np.int64)])
        loss = _nll_numpy(pair_logits, pair_targets)
    else:
        logits = score_logits(b, adapter, texts, labels)
        loss = _nll_numpy(logits.astype(np.float64), golds)
    preds = class_scores(adapter, logits).argmax(axis=-1)
    return loss, float((preds == golds).mean())


# Loops

def make_optimizer(cfg: TrainConfig) -> Callable[[Dict[str, Tensor]], None]:
    if cfg.optimizer == 'sgd':
        return lambda params: sgd_step(params, cfg.lr)
    state = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, epsilon=cfg.epsilon)
    return lambda params: adam_step(params, state)


def _fit(b: Backbone, adapter: Adapter, cfg: TrainConfig, labels: LabelSet,
         step_loss: Callable[[np.random.Generator], Tuple[Tensor, float]],
         val: Optional[Sequence[Example]]) -> TrainResult:
    if not b.frozen:
        raise TrainingError("backbone must be frozen before training an adapter")
    before = b.checksum()
    rng = np.random.default_rng(cfg.seed)
    optimize = make_optimizer(cfg)
    params = adapter.parameters()
    negatives = nli_validation_pairs(val, labels.K, cfg.val_seed) if val and adapter.is_nli else None
    result = TrainResult(adapter)
    reached = False

    logger.info(f"[TRAIN] {adapter.method}: {cfg.steps} steps, batch {cfg.batch}, lr {cfg.lr}, "
                f"{adapter.trainable_count()} trainable parameters")
    for step in range(1, cfg.steps + 1):
        with Tape() as tape:
            loss, batch_acc = step_loss(rng)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(step, value)
        tape.backward(loss)
        optimize(params)
        result.records.append(MetricRecord(step, 'train', value, batch_acc))

        if val and step % cfg.eval_every == 0:
            val_loss, val_acc = validate(b, adapter, val, labels, negatives)
            result.records.append(MetricRecord(step, 'val', val_loss, val_acc))
            logger.info(f"[TRAIN] {adapter.method} step {step}/{cfg.steps}: loss {value:.4f}, "
                        f"val loss {val_loss:.4f}, val accuracy {val_acc:.4f}")
            if not reached and val_loss <= cfg.loss_threshold:
                reached = True
                logger.info(f"[TRAIN] {adapter.method} reached val loss <= {cfg.loss_threshold} at step {step}")
        elif step % cfg.eval_every == 0:
            logger.info(f"[TRAIN] {adapter.method} step {step}/{cfg.steps}: loss {value:.4f}")

    if b.checksum() != before:
        raise TrainingError("backbone weights changed during training")
    return result


def _adapter_for(b: Backbone, method: str, labels: LabelSet, cfg: TrainConfig,
                 adapter_options: Optional[dict]) -> Adapter:
    dims = AdapterDims.for_backbone(b.config, l=labels.l, K=labels.K, **(adapter_options or {}))
    return build_adapter(method, dims, seed=cfg.seed)


def train(b: Backbone, method: str, data: Sequence[Example], labels: LabelSet, cfg: TrainConfig,
          val: Optional[Sequence[Example]] = None, adapter_options: Optional[dict] = None) -> TrainResult:
    """Train an adapter for `method`; baselines are routed to train_baseline."""
    cfg.validate()
    if method in BASELINE_METHODS:
        return train_baseline(b, method, data, labels, cfg, val=val, adapter_options=adapter_options)
    if method not in NLI_METHODS:
        raise ConfigError(f"unknown method '{method}'")
    if labels.K < 2:
        raise ConfigError("NLI training needs K >= 2 labels")
    adapter = _adapter_for(b, method, labels, cfg, adapter_options)

    def step_loss(rng):
        batch = build_nli_batch(data, labels, cfg.batch, rng)
        logits = batch_logits(b, adapter, batch)
        predicted = entailment_probability(logits.data) > 0.5
        acc = float(np.mean(predicted == np.array(batch.targets, dtype=bool)))
        return bce_with_logits(logits, batch.targets), acc

    return _fit(b, adapter, cfg, labels, step_loss, val)


def train_baseline(b: Backbone, method: str, data: Sequence[Example], labels: LabelSet, cfg: TrainConfig,
                   val: Optional[Sequence[Example]] = None, adapter_options: Optional[dict] = None) -> TrainResult:
    """K-way training for the free prefix / soft prompt baselines."""
    cfg.validate()
    if method not in BASELINE_METHODS:
        raise ConfigError(f"train_baseline handles {BASELINE_METHODS}, got '{method}'")
    adapter = _adapter_for(b, method, labels, cfg, adapter_options)

    def step_loss(rng):
        examples = sample_examples(data, cfg.batch, rng)
        loss, logits = baseline_loss(b, adapter, examples, labels.tokenizer)
        preds = softmax_probs(logits.data).argmax(axis=-1)
        acc = float(np.mean(preds == np.array([ex.label_index for ex in examples])))
        return loss, acc

    return _fit(b, adapter, cfg, labels, step_loss, val)


# Gradient check

def check_gradients(b: Backbone, method: str, dims: AdapterDims, seed: int = 0, batch: int = 4,
                    step: float = 1e-4, tolerance: float = 1e-4) -> GradCheckReport:
    """
    Finite-difference check of one method's training loss with respect to
    every adapter parameter group. The adapter is randomized so no group sits
    at a degenerate zero, and the backbone is evaluated in float64.
    """
    rng = np.random.default_rng(seed)
    b64 = Backbone(b.config, {name: Tensor(p.data, name=name, dtype=np.float64) for name, p in b.params.items()})
    adapter = randomize(build_adapter(method, dims, seed=seed), seed=seed)
    vocab = np.arange(UNK_ID + 1, b.config.V)
    texts = [[int(t) for t in rng.choice(vocab, size=int(rng.integers(1, 5)))] for _ in range(batch)]

    if adapter.is_nli:
        labels = [[int(t) for t in rng.choice(vocab, size=dims.l)] for _ in range(dims.K)]
        if dims.l > 1:
            labels[-1][-1] = PAD_ID
        items = [NliItem(tuple(texts[i]), tuple(labels[i % dims.K]), int(i % 2 == 0), i % dims.K)
                 for i in range(batch)]
        nli = NliBatch(items)

        def loss() -> Tensor:
            return batch_loss(b64, adapter, nli)
    else:
        targets = [i % dims.K for i in range(batch)]

        def loss() -> Tensor:
            return cross_entropy_with_logits(adapter.classify(b64, texts), targets)

    report = finite_diff_check(loss, adapter.parameters(), step=step, mode='f64', tolerance=tolerance)
    status = 'passed' if report.passed else 'FAILED'
    logger.info(f"[CHECK] {method}: max relative error {report.max_error:.3e} ({status})")
    return report
