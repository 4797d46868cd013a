"""Federated ensemble simulator: one-shot upload of locally trained models
followed by federated training of a small aggregator over their logits,
with FedAvg-family baselines and exact byte accounting."""

__version__ = "0.1.0"
