"""Desk-scale art-free diffusion lab.

Filter art out of an image-caption corpus, train a small latent diffusion
model on what remains, teach it a style from a handful of exemplars with a
low-rank adapter, then evaluate and attribute the results.
"""

__version__ = "0.1.0"
