"""Causal concept graphs, intervention reasoning, and guided counterfactual editing."""

__version__ = "0.1.0"
