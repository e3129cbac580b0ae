"""
Hypergradients of multilevel optimization problems by implicit differentiation.
"""

__version__ = "0.1.0"
