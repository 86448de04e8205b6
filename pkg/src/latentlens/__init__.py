"""Explain individual latent variables of small VAEs from traversal strips.

Pipeline: train VAE variants, decode one-dimension traversals, sample n
explanations per traversal, score their agreement, and show the most
central explanation only when agreement clears a calibrated threshold.
"""

__version__ = "0.1.0"
