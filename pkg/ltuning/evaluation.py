"""
Prediction and scoring.

Label-conditioned methods score a text against every label and predict the
label with the highest entailment probability (ties go to the lowest
index). Baselines predict the argmax of their K-way head. Conditioning for
the K labels is computed once per adapter and reused through LabelCache.
"""

from __future__ import annotations

import logging
import math
import statistics
from collections import Counter
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Union

import numpy as np

from .adapters import Adapter, BASELINE_METHODS, NLI_METHODS
from .backbone import PAD_ID, Backbone, Tokenizer
from .errors import ConfigError, DataError, ShapeError
from .numerics import no_grad

if TYPE_CHECKING:
    from .training import Example

logger = logging.getLogger(__name__)

NEVER = 'never'
FAILED = 'failed'


class LabelSet:
    """The K label strings with their padded token ids (length l)."""

    def __init__(self, labels: Sequence[str], tokenizer: Tokenizer, length: Optional[int] = None):
        labels = list(labels)
        if len(labels) < 2:
            raise DataError(f"need at least 2 labels, got {len(labels)}")
        dupes = sorted({x for x in labels if labels.count(x) > 1})
        if dupes:
            raise DataError(f"duplicate labels: {', '.join(dupes)}")
        tokens = [tokenizer.encode(x) for x in labels]
        for label, toks in zip(labels, tokens):
            if not toks:
                raise DataError(f"label {label!r} has no tokens")
        longest = max(len(t) for t in tokens)
        l = longest if not length else int(length)
        if l < longest:
            raise DataError(f"label length l={l} is shorter than the longest tokenized label ({longest})")

        self.labels = labels
        self.tokenizer = tokenizer
        self.lengths = [len(t) for t in tokens]
        self.ids = [t + [PAD_ID] * (l - len(t)) for t in tokens]
        self.pad_masks = [[i >= len(t) for i in range(l)] for t in tokens]

    @property
    def K(self) -> int:
        return len(self.labels)

    @property
    def l(self) -> int:
        return len(self.ids[0])

    def index(self, label: str) -> int:
        return self.labels.index(label)

    def __len__(self) -> int:
        return self.K


@dataclass(frozen=True)
class CurvePoint:
    method: str
    seed: int
    step: int
    val_loss: float


@dataclass
class Prediction:
    predicted_index: int
    scores: List[float]


def entailment_probability(logits: np.ndarray) -> np.ndarray:
    """P(entail) from [.., 2] logits: softmax over the last axis, column 1."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=-1, keepdims=True))[..., 1]


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def argmax_first(scores: Sequence[float]) -> int:
    """Index of the maximum; the lowest index wins ties."""
    return int(np.argmax(np.asarray(scores)))


class LabelCache:
    """
    Per-label conditioning for a fixed adapter: one entry per label for
    single-text prediction, plus a stacked [K, ..] copy for batched scoring.
    """

    def __init__(self, backbone: Backbone, adapter: Adapter, labels: LabelSet):
        if not adapter.is_nli:
            raise ValueError(f"label caching applies to {NLI_METHODS}, not '{adapter.method}'")
        self.backbone = backbone
        self.adapter = adapter
        self.labels = labels
        with no_grad():
            self.single = [adapter.condition(backbone, [labels.ids[k]], [labels.pad_masks[k]])
                           for k in range(labels.K)]
        self._stacked = None

    @property
    def stacked(self):
        if self._stacked is None:
            with no_grad():
                self._stacked = self.adapter.condition(self.backbone, self.labels.ids, self.labels.pad_masks)
        return self._stacked


def nli_predict(b: Backbone, adapter: Adapter, text: str, labels: LabelSet,
                cache: Optional[LabelCache] = None) -> Prediction:
    """Score `text` against each label and return the argmax (lowest index on ties)."""
    if not adapter.is_nli:
        raise ValueError(f"nli_predict needs one of {NLI_METHODS}, got '{adapter.method}'")
    cache = cache or LabelCache(b, adapter, labels)
    ids = labels.tokenizer.encode(text)
    scores = []
    with no_grad():
        for k in range(labels.K):
            logits = adapter.classify(b, cache.single[k], [0], [ids])
            scores.append(float(entailment_probability(logits.data[0])))
    return Prediction(argmax_first(scores), scores)


def accuracy(preds: Sequence[int], golds: Sequence[int]) -> float:
    if len(preds) != len(golds):
        raise ShapeError("predictions and gold labels differ in length", (len(preds),), (len(golds),))
    if not preds:
        raise ValueError("accuracy of an empty prediction list")
    return sum(int(p == g) for p, g in zip(preds, golds)) / len(preds)


# Batched scoring

def score_logits(b: Backbone, adapter: Adapter, texts: Sequence[Sequence[int]], labels: LabelSet,
                 cache: Optional[LabelCache] = None, chunk_size: int = 512) -> np.ndarray:
    """
    Raw logits for a list of tokenized texts: [N, K, 2] for label-conditioned
    adapters (each text against each label), [N, K] for baselines.
    """
    texts = [list(t) for t in texts]
    with no_grad():
        if adapter.method in BASELINE_METHODS:
            parts = [adapter.classify(b, texts[i:i + chunk_size]).data for i in range(0, len(texts), chunk_size)]
            return np.concatenate(parts, axis=0) if parts else np.zeros((0, labels.K))

        cache = cache or LabelCache(b, adapter, labels)
        K = labels.K
        pairs = [(t, k) for t in range(len(texts)) for k in range(K)]
        out = np.zeros((len(texts), K, 2), dtype=np.float64)
        for i in range(0, len(pairs), chunk_size):
            chunk = pairs[i:i + chunk_size]
            logits = adapter.classify(b, cache.stacked, [k for _, k in chunk], [texts[t] for t, _ in chunk])
            for (t, k), row in zip(chunk, logits.data):
                out[t, k] = row
        return out


def class_scores(adapter: Adapter, logits: np.ndarray) -> np.ndarray:
    """[N, K] per-label scores: P(entail) for NLI adapters, softmax otherwise."""
    if adapter.is_nli:
        return entailment_probability(logits)
    return softmax_probs(logits)


def _score_chunk(args):
    b, adapter, texts, labels, cache = args
    return score_logits(b, adapter, texts, labels, cache)


def evaluate(b: Backbone, adapter: Adapter, examples: Sequence[Example], labels: LabelSet,
             workers: int = 1, chunk_size: int = 512) -> dict:
    """Accuracy, count and per-label accuracy over `examples`."""
    if not examples:
        raise DataError("no examples to evaluate")
    texts = [labels.tokenizer.encode(ex.text) for ex in examples]
    golds = [ex.label_index for ex in examples]
    cache = LabelCache(b, adapter, labels) if adapter.is_nli else None
    if cache is not None and workers > 1:
        _ = cache.stacked

    if workers > 1:
        step = max(1, math.ceil(len(texts) / workers))
        jobs = [(b, adapter, texts[i:i + step], labels, cache) for i in range(0, len(texts), step)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            logits = np.concatenate(list(pool.map(_score_chunk, jobs)), axis=0)
    else:
        logits = score_logits(b, adapter, texts, labels, cache, chunk_size)

    preds = [argmax_first(row) for row in class_scores(adapter, logits)]
    per_label = {}
    for k, name in enumerate(labels.labels):
        idx = [i for i, g in enumerate(golds) if g == k]
        per_label[name] = accuracy([preds[i] for i in idx], [k] * len(idx)) if idx else None
    result = {
        'accuracy': accuracy(preds, golds),
        'n': len(examples),
        'per_label_accuracy': per_label,
    }
    logger.info(f"[EVAL] {adapter.method}: accuracy {result['accuracy']:.4f} over {result['n']} examples")
    return result


# Convergence comparison

@dataclass
class ConvergenceResult:
    curves: List[CurvePoint]
    steps_to_threshold: Dict[str, Dict[int, Union[int, str]]]
    failures: Dict[str, Dict[int, str]] = field(default_factory=dict)

    def summary(self) -> Dict[str, Dict[str, Union[int, str]]]:
        return {m: {str(s): v for s, v in runs.items()} for m, runs in self.steps_to_threshold.items()}

    def median_steps(self, method: str) -> float:
        return median_steps(self.steps_to_threshold.get(method, {}).values())


def median_steps(values) -> float:
    """Median steps-to-threshold with 'never' counted as infinity; failed runs are skipped."""
    nums = [math.inf if v == NEVER else float(v) for v in values if v != FAILED]
    if not nums:
        return math.inf
    return statistics.median(nums)


def first_step_at_or_below(points: Sequence[CurvePoint], threshold: float) -> Union[int, str]:
    for p in points:
        if p.val_loss <= threshold:
            return p.step
    return NEVER


def _train_one(args):
    from .training import train

    backbone, method, seed, data, val, labels, cfg, adapter_options = args
    run_cfg = replace(cfg, seed=seed, method=method)
    result = train(backbone, method, data, labels, run_cfg, val=val, adapter_options=adapter_options)
    return [CurvePoint(method, seed, r.step, r.loss) for r in result.records if r.split == 'val']


def _distinct(values: Sequence, name: str) -> list:
    unique = list(dict.fromkeys(values))
    repeated = sorted(str(v) for v, n in Counter(values).items() if n > 1)
    if repeated:
        logger.warning(f"[COMPARE] each {name} runs once; ignoring repeats of {', '.join(repeated)}")
    return unique


def compare_convergence(b: Backbone, methods: Sequence[str], data: Sequence[Example], labels: LabelSet,
                        seeds: Sequence[int], threshold: float, cfg, val: Sequence[Example],
                        adapter_options: Optional[dict] = None, workers: int = 1) -> ConvergenceResult:
    """
    Train every (method, seed) pair on the same data and config, record the
    validation-loss curves, and find the first step at or below `threshold`.
    A failing run is logged and reported; the remaining runs still complete.
    Repeated methods or seeds run once.
    """
    if not methods:
        raise ConfigError("compare_convergence needs at least one method")
    if not seeds:
        raise ConfigError("compare_convergence needs at least one seed")
    methods, seeds = _distinct(methods, 'method'), _distinct(seeds, 'seed')
    if not (math.isfinite(threshold) and threshold > 0):
        raise ConfigError(f"threshold must be a positive number, got {threshold}")
    if not val:
        raise DataError("compare_convergence needs a validation split")

    grid = [(m, s) for m in methods for s in seeds]
    jobs = [(b, m, s, data, val, labels, cfg, adapter_options) for m, s in grid]

    outcomes = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_train_one, job) for job in jobs]
            for fut in futures:
                try:
                    outcomes.append(fut.result())
                except Exception as e:
                    outcomes.append(e)
    else:
        for job in jobs:
            try:
                outcomes.append(_train_one(job))
            except Exception as e:
                outcomes.append(e)

    curves: List[CurvePoint] = []
    steps: Dict[str, Dict[int, Union[int, str]]] = {m: {} for m in methods}
    failures: Dict[str, Dict[int, str]] = {}
    for (method, seed), outcome in zip(grid, outcomes):
        if isinstance(outcome, Exception):
            logger.error(f"[ERROR] {method} seed {seed} failed: {outcome}")
            steps[method][seed] = FAILED
            failures.setdefault(method, {})[seed] = str(outcome)
            continue
        curves.extend(outcome)
        steps[method][seed] = first_step_at_or_below(outcome, threshold)
        logger.info(f"[COMPARE] {method} seed {seed}: steps to val loss <= {threshold}: {steps[method][seed]}")
    return ConvergenceResult(curves, steps, failures)
