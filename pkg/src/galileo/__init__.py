"""Adversarial counterfactual environment-model learning with synthetic biased-data benchmarks."""

__version__ = "0.1.0"
