"""Label-consistent restricted Boltzmann machines for collaborative filtering."""

__version__ = "0.1.0"
