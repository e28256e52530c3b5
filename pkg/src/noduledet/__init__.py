"""Two-stage lung nodule detection: a slice-level region detector proposes
candidates and a volumetric classifier rescores them."""

__version__ = "0.1.0"
