"""
L-Tuning - label-conditioned prefix and prompt tuning on a frozen toy transformer.

Modules:
    numerics     Tensor, reverse-mode tape, Adam/SGD, finite-difference oracle
    backbone     Frozen decoder-only transformer, tokenizer, weight files
    adapters     LT-prefix, LT-prompt and baseline prefix/prompt adapters
    training     NLI batches, BCE objective, training loops
    evaluation   Label sets, argmax prediction, accuracy, convergence harness
    data         JSONL/TSV ingestion and the synthetic keyword task
    reporting    CSV/JSON/XLSX result files
"""

__version__ = '0.1.0'
