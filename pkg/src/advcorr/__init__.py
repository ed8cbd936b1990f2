"""Cutting-plane fine-tuning of dense ReLU classifiers against adversarial examples."""

from .network import (
    DenseLayer,
    LabeledDataset,
    Network,
    ParamVector,
    blend,
    forward,
    from_vector,
    loss,
    predict,
    to_vector,
)

__version__ = "0.1.0"
