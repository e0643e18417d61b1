"""Continuous neural algorithmic planner: value-iteration executor inside a PPO agent."""

__version__ = "0.1.0"
