"""Implicit neural stream functions for 3D vector fields.

Train a sinusoidal residual MLP whose spatial gradient stays orthogonal to a
supplied vector field, so level sets of the learned scalar field are stream
surfaces; evaluate, trace, sample, and export the result.
"""

__version__ = "0.1.0"
