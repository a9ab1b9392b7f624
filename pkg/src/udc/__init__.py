"""Unified neural divide-and-conquer solver for routing, knapsack and independent-set problems."""
from .problems import Instance, Kind, Solution, check_feasibility, evaluate_objective, gap, generate_instance

__version__ = "0.1.0"

__all__ = ["Instance", "Kind", "Solution", "check_feasibility", "evaluate_objective", "gap", "generate_instance"]
