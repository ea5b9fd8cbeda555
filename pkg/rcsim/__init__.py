# Deterministic simulator for hierarchical BFT consensus
__version__ = "1.0.0"
