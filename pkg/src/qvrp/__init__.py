"""Hybrid quantum-classical attention agents for tensor-demand vehicle routing."""

__version__ = "0.1.0"
