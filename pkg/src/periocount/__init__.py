"""Repetition counting on synthetic periodic videos.

A small end-to-end stack: a from-scratch autodiff substrate, a synthetic
periodic-video generator with exact cycle annotations, a learnable-query
periodicity transformer feeding periodic tokens into a character-level
decoder language model, three-stage progressive training, and OBO/MAE
evaluation with figure-emitting reports.
"""

__version__ = "0.1.0"
