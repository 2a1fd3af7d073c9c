"""Session-invariant subject identification from multichannel epochs.

A convolutional encoder is trained to identify subjects while an adversary
head tries to recover the recording session from the same features.
"""
from .dataio import Dataset, SynthConfig, read_dataset, synth_generate, write_dataset
from .estimator import AdversarialCNNClassifier
from .model import EncoderConfig, Network, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, train

__all__ = [
    "AdversarialCNNClassifier",
    "Dataset",
    "EncoderConfig",
    "Network",
    "SynthConfig",
    "TrainConfig",
    "load_checkpoint",
    "read_dataset",
    "save_checkpoint",
    "synth_generate",
    "train",
    "write_dataset",
]
