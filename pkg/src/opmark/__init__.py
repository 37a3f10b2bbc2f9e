"""Opcode Markov-matrix features, obfuscation and tree-ensemble detection."""
__version__ = "0.1.0"
