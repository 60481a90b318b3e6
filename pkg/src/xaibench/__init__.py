"""Benchmarking explanation methods on synthetic visual question answering scenes."""
__version__ = "0.1.0"
