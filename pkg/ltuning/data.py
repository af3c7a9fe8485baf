"""
Dataset ingestion and the synthetic keyword task.

A dataset directory holds:
    labels.txt    one label string per line, index = line number
    vocab.txt     tokenizer vocabulary, id = line number
    train.jsonl   {"label": ..., "text": ...} per line
    val.jsonl     same format (test.jsonl optional)
GLUE-style TSV files (header row, tab separated) load through load_tsv_glue.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .backbone import PAD_TOKEN, UNK_TOKEN, Tokenizer
from .errors import DataError, IngestionError, MissingColumnError, RaggedRowError, VocabularyOverflowError
from .evaluation import LabelSet
from .fileio import PathLike, read_lines, write_lines
from .training import Example

logger = logging.getLogger(__name__)

LABELS_FILE = 'labels.txt'
VOCAB_FILE = 'vocab.txt'
SPLITS = ('train', 'val', 'test')
LABEL_PREFIX = 'about'

KEYWORD_POOL = (
    'apple', 'river', 'engine', 'violin', 'comet', 'tiger', 'garden', 'castle',
    'rocket', 'pepper', 'glacier', 'harbor', 'lantern', 'meadow', 'needle', 'orchid',
    'pirate', 'quartz', 'saddle', 'thunder', 'velvet', 'walnut', 'canyon', 'falcon',
    'marble', 'piano', 'desert', 'cotton', 'dragon', 'forest', 'helmet', 'island',
    'jungle', 'kettle', 'lemon', 'mirror', 'nectar', 'oyster', 'parrot', 'rabbit',
    'silver', 'tomato', 'valley', 'wizard', 'anchor', 'bishop', 'candle', 'dolphin',
)
FILLER_POOL = (
    'the', 'a', 'of', 'and', 'to', 'in', 'is', 'was', 'it', 'that', 'with', 'as',
    'for', 'on', 'at', 'by', 'this', 'from', 'or', 'an', 'be', 'are', 'had', 'not',
    'but', 'some', 'what', 'there', 'we', 'can', 'out', 'other', 'were', 'all', 'when',
    'up', 'use', 'how', 'said', 'each', 'she', 'which', 'do', 'their', 'if', 'will',
    'way', 'many', 'then', 'them', 'would', 'like', 'so', 'these', 'her', 'long',
    'make', 'thing', 'see', 'him', 'two', 'has', 'look', 'more', 'day', 'could',
)


@dataclass
class Dataset:
    label_names: List[str]
    splits: Dict[str, List[Example]] = field(default_factory=dict)
    vocabulary: Optional[List[str]] = None

    @property
    def K(self) -> int:
        return len(self.label_names)

    def examples(self, split: str) -> List[Example]:
        if split not in self.splits:
            raise DataError(f"dataset has no '{split}' split (available: {', '.join(self.splits) or 'none'})")
        return self.splits[split]

    def tokenizer(self) -> Tokenizer:
        if self.vocabulary is None:
            words = [w for name in self.label_names for w in name.lower().split()]
            for examples in self.splits.values():
                for ex in examples:
                    words.extend(ex.text.lower().split())
            return Tokenizer.build(words)
        return Tokenizer(self.vocabulary)

    def label_set(self, tokenizer: Optional[Tokenizer] = None, length: Optional[int] = None) -> LabelSet:
        return LabelSet(self.label_names, tokenizer or self.tokenizer(), length)


# Label files

def load_labels(path: PathLike) -> List[str]:
    """Newline-delimited label strings; index = line number. K >= 2, no blanks or duplicates."""
    labels = [line.strip() for line in read_lines(path)]
    for i, label in enumerate(labels, start=1):
        if not label:
            raise IngestionError("blank label", line=i, path=str(path))
    if len(labels) < 2:
        raise DataError(f"{path}: need at least 2 labels, got {len(labels)}")
    seen = set()
    for i, label in enumerate(labels, start=1):
        if label in seen:
            raise IngestionError(f"duplicate label {label!r}", line=i, path=str(path))
        seen.add(label)
    return labels


def _label_index(value: str, label_names: Sequence[str], line: int, path: str) -> int:
    if value in label_names:
        return list(label_names).index(value)
    # GLUE ships integer labels ("0", "1"); accept them as indices
    if value.isdigit() and int(value) < len(label_names):
        return int(value)
    raise IngestionError(f"unknown label {value!r}", line=line, path=path)


# JSONL

def read_jsonl_examples(path: PathLike, label_names: Sequence[str]) -> List[Example]:
    examples = []
    with open(path, 'r', encoding='utf-8') as f:
        for i, raw in enumerate(f, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as e:
                raise IngestionError(f"malformed JSON ({e.msg})", line=i, path=str(path)) from e
            if not isinstance(record, dict):
                raise IngestionError("expected a JSON object", line=i, path=str(path))
            text, label = record.get('text'), record.get('label')
            if not isinstance(text, str) or not isinstance(label, str):
                raise IngestionError("fields 'text' and 'label' must be strings", line=i, path=str(path))
            examples.append(Example(text, _label_index(label, label_names, i, str(path))))
    return examples


def load_jsonl(path: PathLike, labels_path: PathLike, split: Optional[str] = None) -> Dataset:
    label_names = load_labels(labels_path)
    examples = read_jsonl_examples(path, label_names)
    if not examples:
        raise DataError(f"{path}: no examples")
    name = split or Path(path).stem
    logger.info(f"[DATA] {path}: {len(examples)} examples, K={len(label_names)}")
    return Dataset(label_names, {name: examples})


def write_jsonl(path: PathLike, examples: Sequence[Example], label_names: Sequence[str]) -> Path:
    lines = [json.dumps({'label': label_names[ex.label_index], 'text': ex.text}, sort_keys=True, ensure_ascii=False)
             for ex in examples]
    return write_lines(path, lines)


# GLUE-style TSV

def _check_ragged(path: PathLike) -> int:
    """Every data row must have as many fields as the header."""
    lines = read_lines(path)
    if not lines:
        raise DataError(f"{path}: empty file")
    width = len(lines[0].split('\t'))
    for i, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        fields = len(line.split('\t'))
        if fields != width:
            raise RaggedRowError(f"expected {width} fields, got {fields}", line=i, path=str(path))
    return width


def load_tsv_glue(path: PathLike, text_column: str, label_column: str, labels_path: PathLike,
                  split: Optional[str] = None) -> Dataset:
    label_names = load_labels(labels_path)
    _check_ragged(path)
    frame = pd.read_csv(path, sep='\t', dtype=str, keep_default_na=False, quoting=csv.QUOTE_NONE)
    for column in (text_column, label_column):
        if column not in frame.columns:
            raise MissingColumnError(column, list(frame.columns))

    examples = []
    for offset, (text, label) in enumerate(zip(frame[text_column], frame[label_column])):
        examples.append(Example(text, _label_index(label.strip(), label_names, offset + 2, str(path))))
    if not examples:
        raise DataError(f"{path}: no examples")
    name = split or Path(path).stem
    logger.info(f"[DATA] {path}: {len(examples)} examples from columns {text_column}/{label_column}")
    return Dataset(label_names, {name: examples})


# Dataset directories

def load_dataset_dir(directory: PathLike, text_column: str = 'sentence', label_column: str = 'label') -> Dataset:
    """Load labels, vocabulary (if present) and every split file found in `directory`."""
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"dataset directory not found: {directory}")
    labels_path = directory / LABELS_FILE
    if not labels_path.exists():
        raise DataError(f"{directory}: missing {LABELS_FILE}")
    label_names = load_labels(labels_path)
    vocab_path = directory / VOCAB_FILE
    vocabulary = read_lines(vocab_path) if vocab_path.exists() else None

    splits: Dict[str, List[Example]] = {}
    for name in SPLITS:
        jsonl, tsv = directory / f"{name}.jsonl", directory / f"{name}.tsv"
        if jsonl.exists():
            splits[name] = read_jsonl_examples(jsonl, label_names)
        elif tsv.exists():
            splits[name] = load_tsv_glue(tsv, text_column, label_column, labels_path, split=name).splits[name]
    if not splits:
        raise DataError(f"{directory}: no split files (expected one of {', '.join(SPLITS)} as .jsonl or .tsv)")

    if 'train' in splits and 'val' in splits:
        overlap = {ex.text for ex in splits['train']} & {ex.text for ex in splits['val']}
        if overlap:
            logger.warning(f"[DATA] {len(overlap)} texts appear in both train and val")
    counts = ', '.join(f"{k}={len(v)}" for k, v in splits.items())
    logger.info(f"[DATA] {directory}: K={len(label_names)}, {counts}")
    return Dataset(label_names, splits, vocabulary)


# Synthetic keyword task

@dataclass(frozen=True)
class SynthSpec:
    K: int = 4
    keywords_per_class: int = 3
    filler_size: int = 48
    min_len: int = 5
    max_len: int = 12
    min_keywords: int = 1
    max_keywords: int = 3
    seed: int = 0
    V: int = 512

    def validate(self) -> 'SynthSpec':
        if self.K < 2:
            raise DataError(f"synthetic task needs K >= 2, got {self.K}")
        if self.keywords_per_class < 2:
            raise DataError("each class needs at least 2 keywords (labels use two of them)")
        if not 1 <= self.min_keywords <= self.max_keywords <= self.keywords_per_class:
            raise DataError("planted keyword range must satisfy 1 <= min <= max <= keywords_per_class")
        if not self.max_keywords <= self.min_len <= self.max_len:
            raise DataError("text length range must satisfy max_keywords <= min_len <= max_len")
        if self.filler_size < 1:
            raise DataError("filler vocabulary must be nonempty")
        return self


def _word_pool(base: Sequence[str], count: int, stem: str) -> List[str]:
    words = list(base)
    i = 0
    while len(words) < count:
        words.append(f"{stem}{i}")
        i += 1
    return words


def assign_keywords(spec: SynthSpec) -> List[List[str]]:
    """Pairwise disjoint keyword lists, one per class, drawn under spec.seed."""
    need = spec.K * spec.keywords_per_class
    pool = _word_pool(KEYWORD_POOL, need, 'topic')
    rng = np.random.default_rng(spec.seed)
    picked = [pool[int(i)] for i in rng.permutation(len(pool))[:need]]
    n = spec.keywords_per_class
    return [picked[k * n:(k + 1) * n] for k in range(spec.K)]


def filler_words(spec: SynthSpec) -> List[str]:
    return _word_pool(FILLER_POOL, spec.filler_size, 'filler')[:spec.filler_size]


def synth_label(keywords: Sequence[str]) -> str:
    return f"{LABEL_PREFIX} {keywords[0]} {keywords[1]}"


def _synth_text(rng: np.random.Generator, spec: SynthSpec, keywords: Sequence[str], fillers: Sequence[str]) -> str:
    n = int(rng.integers(spec.min_len, spec.max_len + 1))
    planted = int(rng.integers(spec.min_keywords, spec.max_keywords + 1))
    words = [fillers[int(i)] for i in rng.integers(0, len(fillers), size=n)]
    positions = rng.choice(n, size=planted, replace=False)
    chosen = rng.choice(len(keywords), size=planted, replace=False)
    for pos, kw in zip(positions, chosen):
        words[int(pos)] = keywords[int(kw)]
    return ' '.join(words)


def gen_synth(spec: SynthSpec, n_train: int, n_val: int, out_dir: Optional[PathLike] = None) -> Dataset:
    """
    Generate the keyword task. Classes are assigned round-robin and then
    shuffled; validation texts never repeat a training text. With out_dir set
    the dataset directory files are written there.
    """
    spec.validate()
    if n_train < 1 or n_val < 0:
        raise DataError(f"need n_train >= 1 and n_val >= 0, got {n_train}/{n_val}")
    keywords = assign_keywords(spec)
    fillers = filler_words(spec)
    label_names = [synth_label(kws) for kws in keywords]
    vocabulary = [PAD_TOKEN, UNK_TOKEN, LABEL_PREFIX] + [w for kws in keywords for w in kws] + fillers
    if len(vocabulary) > spec.V:
        raise VocabularyOverflowError(f"synthetic vocabulary needs {len(vocabulary)} entries, backbone V={spec.V}")
    if len(set(vocabulary)) != len(vocabulary):
        raise DataError("synthetic keyword and filler pools overlap")

    rng = np.random.default_rng(spec.seed + 1)

    def split(count: int, exclude: set) -> List[Example]:
        classes = [i % spec.K for i in range(count)]
        classes = [classes[int(j)] for j in rng.permutation(count)]
        out = []
        for k in classes:
            for _ in range(1000):
                text = _synth_text(rng, spec, keywords[k], fillers)
                if text not in exclude:
                    break
            else:
                raise DataError("could not draw a validation text distinct from the training split")
            out.append(Example(text, k))
        return out

    train = split(n_train, set())
    val = split(n_val, {ex.text for ex in train})
    dataset = Dataset(label_names, {'train': train, 'val': val}, vocabulary)

    if out_dir is not None:
        out = Path(out_dir)
        write_synth_files(dataset, out)
        logger.info(f"[DATA] wrote synthetic task to {out}: K={spec.K}, train={n_train}, val={n_val}")
    return dataset


def write_synth_files(dataset: Dataset, out_dir: PathLike) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, examples in dataset.splits.items():
        write_jsonl(out / f"{name}.jsonl", examples, dataset.label_names)
    write_lines(out / LABELS_FILE, dataset.label_names)
    if dataset.vocabulary is not None:
        write_lines(out / VOCAB_FILE, dataset.vocabulary)
    return out


def keyword_predict(keywords: Sequence[Sequence[str]], text: str) -> int:
    """Bag-of-keywords classifier: the class whose keywords occur most often."""
    words = text.lower().split()
    counts = [sum(words.count(w) for w in kws) for kws in keywords]
    return int(np.argmax(counts))
