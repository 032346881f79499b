"""Depth up-scaling of a pre-trained toy language model for a new (speech) modality."""

__version__ = "0.1.0"
