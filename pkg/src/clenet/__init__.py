"""From-scratch CNN + convolutional autoencoder for circular-FOV
microscopy patch classification: data synthesis, training, evaluation,
and a CLI pipeline."""

__version__ = "0.1.0"
