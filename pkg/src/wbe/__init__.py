"""Wide-band rotation-equivariant inverse scattering.

Subpackages and modules
-----------------------
core       grids, frequency sets, the seeded RNG and the WBT1 tensor format
media      synthetic scatterer families and quarter-turn rotation
helmholtz  finite-difference Helmholtz simulator producing far-field data
born       Born kernel, analytic adjoint and filtered back-projection
butterfly  complementary low-rank checks and butterfly factorization
model      the uncompressed and compressed networks, autodiff tape and training
harness    experiment configuration and the ``wbe`` command line
"""

__version__ = "0.1.0"
