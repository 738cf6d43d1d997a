"""Forest-fire cellular automaton coupled to decentralized learning agents."""

__version__ = "0.1.0"
