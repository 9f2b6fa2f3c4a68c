"""Desk-scale ViLT: a patch-projection vision-and-language transformer."""

__version__ = "0.1.0"
