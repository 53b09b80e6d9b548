"""Field-circuit co-simulation with transient port extraction.

Mixed E-B finite elements on tetrahedra, a transient MNA circuit engine, a
1D drift-diffusion diode, a monolithic coupled solve and the impulse-archive
replay path that reproduces it.
"""

from .errors import EmcktError

__version__ = "0.1.0"

__all__ = ["EmcktError", "__version__"]
