"""Reinforcement-learning recommendation policies trained and evaluated on log-built environments."""

__version__ = "0.1.0"
