"""Reach/avoid task specifications, task graphs, and a hierarchical planner-agent."""

__version__ = "0.1.0"
