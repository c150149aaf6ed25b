"""Solver for Wasserstein gradient flows via parameterized push-forward maps.

The flow on densities is reduced to an ODE on map parameters,
theta_dot = -G(theta)^+ grad F(theta), where G is the sample-averaged Gram
matrix of parameter Jacobians and the solve is matrix-free MINRES.
"""

__version__ = "0.1.0"
