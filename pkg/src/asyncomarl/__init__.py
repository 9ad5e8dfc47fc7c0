"""Asynchronous multi-agent RL with graph-transformer communication over dynamic graphs."""

__version__ = "0.1.0"
