"""Toy multimodal decoder with dual-question attention mixing and attention diagnostics."""

__version__ = "0.1.0"
