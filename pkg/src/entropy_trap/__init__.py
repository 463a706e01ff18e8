"""Exact MaxEnt RL analysis on interval-action MDPs."""

__version__ = "0.1.0"
