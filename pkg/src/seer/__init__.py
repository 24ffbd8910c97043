"""Exemplar selection for in-context hybrid table+text QA.

Selection strategies (knapsack-based and baselines), attribute prediction,
prompt assembly, a restricted program interpreter, and evaluation metrics.
"""

__version__ = "0.1.0"
