"""Group-wise diffusion for inverse rendering on procedural scenes.

Kept import-free so the CLI can pin thread counts before numpy loads.
"""
__version__ = "0.1.0"
