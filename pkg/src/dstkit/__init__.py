"""Data-free black-box substitute training with dynamically gated residual
substitutes and a graph-structured distillation loss."""

__version__ = "0.1.0"
