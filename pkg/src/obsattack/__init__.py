"""Observation-perturbation attacks on reinforcement-learning policies, with
exact certificates on small gridworlds."""

__version__ = "0.1.0"
