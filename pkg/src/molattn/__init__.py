"""Molecule Attention Transformer: parsing, featurization, model, training, analysis."""

__version__ = "0.1.0"
