"""chaoslab: desk-scale workbench for interacting-particle diffusions on the torus.

Simulates the mean-field PDE, the N-particle system that generates it, and
exact small-N joint laws, then audits the distance between them with entropy
and concentration tooling.
"""

__version__ = "0.1.0"

from .kernels import KernelMode, KernelSpec, KernelField, build_kernel, certify_bounds

__all__ = [
    "KernelMode",
    "KernelSpec",
    "KernelField",
    "build_kernel",
    "certify_bounds",
    "__version__",
]
