"""Training-free activation sparsity toolkit for a toy decoder-only model."""

__version__ = "0.1.0"
