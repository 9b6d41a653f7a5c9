"""Test-time back-propagation of auxiliary evidence through a multi-task network."""

__version__ = "0.1.0"
