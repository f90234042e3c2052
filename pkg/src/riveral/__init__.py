"""Budgeted real-time labeling on river networks.

A graph-recurrent predictive model (:mod:`riveral.model`) is fine-tuned on
labels that a Q-learning decision model (:mod:`riveral.agent`) requests one
day at a time under a total and a yearly budget (:mod:`riveral.env`).
"""
from .backend import kernels

__version__ = "0.1.0"
__all__ = ["kernels", "__version__"]
