"""riemflow: reflecting diffusions under time-dependent metrics.

Simulation of the reflecting diffusion generated by Δ_t + Z_t on model
manifolds with evolving metrics, derivative formulae with damping
matrices, displacement couplings, Girsanov Harnack machinery, and a
numerical verification suite for the associated functional inequalities.
"""

__version__ = "0.1.0"

from . import (catalog, coupling, derivative, diffusion, geometry,  # noqa: F401
               harnack, oracle, verify)
