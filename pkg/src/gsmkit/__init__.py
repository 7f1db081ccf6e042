"""Generalized standard materials from two potentials.

A material law is specified by a free energy density omega(eps, a) and a
force potential psi(A). Everything else -- stresses, evolution equations,
Jacobians, consistent tangent operators -- is derived by built-in
automatic differentiation and integrated with adaptive error-controlled
ODE schemes. A small FFT-based homogenization solver exercises the laws
on periodic voxel grids.
"""

from . import ad, linalg, gsm
