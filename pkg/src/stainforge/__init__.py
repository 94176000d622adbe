"""stainforge: unsupervised stain normalization via stain removal and
multi-stage domain-adversarial style reconstruction, with a synthetic
paired-domain corpus for desk-scale validation."""

__version__ = "0.1.0"
