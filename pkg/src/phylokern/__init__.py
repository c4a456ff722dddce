"""Phylogeny-aware string kernels for 16S rRNA gene sequencing data."""

__version__ = "0.1.0"
