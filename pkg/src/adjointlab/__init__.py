"""Gradient-based recovery of slow hidden dynamics from fast acoustic surveys.

Submodules:

- ``tape``: reverse-mode tape with custom ops and a checkpointed scan
- ``dynamics``: implicit advection-diffusion, Caputo (L1) and spectral
  fractional diffusion steppers with hand-written adjoints
- ``wave``: staggered-grid acoustic propagation with C-PML and its discrete adjoint
- ``coupling``: snapshot -> upscale -> bulk modulus -> survey misfit graph
- ``inverse``: synthetic data, projected L-BFGS, recovery tables
- ``verify``: Taylor remainder / finite-difference checks, stability diagnostics
- ``config``, ``cli``: run configuration and command-line front end
"""

from . import tape, dynamics, wave, coupling, inverse, verify  # noqa: F401  (registers ops)

__version__ = "0.1.0"
