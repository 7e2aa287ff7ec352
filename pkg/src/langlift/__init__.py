"""Toolkit for adapting a multilingual causal LM to a less-resourced language.

Pipeline: merge a language-specific subword vocabulary into the base
tokenizer, extend the embedding tables, train low-rank adapters with
bilingual causal-LM pretraining and output-masked instruction tuning,
then evaluate with a log-likelihood harness and blinded pairwise
preference judgments.
"""

__version__ = "0.1.0"
