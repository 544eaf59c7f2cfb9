"""
VEM Solver - Variation-evolving solver for optimal control problems

This package turns a finite-horizon optimal control problem into a flow in
a virtual "variation time" whose equilibrium satisfies the first-order
optimality conditions, and integrates that flow to convergence.
"""

__version__ = "0.1.0"
__author__ = "VEM Solver Team"
