"""Task-driven infrared/visible image fusion trained as a bi-level problem."""

__version__ = "0.1.0"
