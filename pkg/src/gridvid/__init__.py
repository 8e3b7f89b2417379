"""Masked-token video transformer on a synthetic grid world.

Train a small bidirectional transformer with masked visual token modeling,
fine-tune lightweight adapters to bind custom concepts to identifier tokens,
and generate long videos window by window with per-window prompt schedules.
Everything (data, training, decoding, evaluation) is deterministic given a
seed, and the evaluation oracles are exact by construction.
"""

__version__ = "0.1.0"
