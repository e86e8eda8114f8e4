"""Few-shot generation of implicit-neural-representation weights via permutation symmetry."""

__version__ = "0.1.0"
