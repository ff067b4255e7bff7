"""
OCN - Optimal Control Neural Network experiments
"""

__version__ = "1.0.0"
