"""Subspace-constrained margin measurement for classifiers: DCT subspaces,
synthetic datasets, numpy MLPs, DeepFool/PGD attacks, margin campaigns and
the one-step linear margin-ratio law."""

__version__ = "0.1.0"
