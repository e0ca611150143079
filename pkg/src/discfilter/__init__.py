"""Filtered coarse operators for 1D periodic convection.

Submodules: ``stencils`` (grids and circulant finite differences),
``filterbank`` (non-uniform filter matrices), ``dns`` (fine-grid data),
``inference`` (intrusive, derivative-fit and embedded operators),
``adjoint`` (differentiable RK4), ``evaluation`` (error metrics and studies),
``io`` and ``cli`` (files and command line).

The package root deliberately imports nothing heavy so that the command line
can fix BLAS thread counts before numpy loads.
"""

__version__ = "0.1.0"
