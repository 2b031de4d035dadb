"""Intracranial artery labeling with a graph neural network and hierarchical refinement."""

__version__ = "0.1.0"
