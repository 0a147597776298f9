"""Non-Abelian holonomies of guided modes in slowly deformed waveguides."""

__version__ = "0.1.0"
