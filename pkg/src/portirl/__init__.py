"""Inverse-reinforcement-learning toolkit for port berth scheduling."""

__version__ = "0.1.0"
