"""Desk-scale laboratory for adaptive multi-head contrastive learning.

A from-scratch reverse-mode autodiff engine drives four contrastive loss
families (ntxent, infonce, symmetric negative cosine, cross-correlation)
in single-head baseline and multi-head adaptive-temperature form, with a
deterministic two-view augmentation pipeline, a synthetic dataset
generator, nearest-neighbor and linear-probe evaluation, and similarity-
distribution separability analysis.
"""

__version__ = "0.1.0"
