"""Sequence-to-sequence ASR with multi-modal (MMDA) and pseudo-speech (PSDA)
text-based data augmentation, pretraining and shallow-fusion decoding."""

__version__ = "0.1.0"
