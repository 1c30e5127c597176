"""bridgelab: exact Sinkhorn / Schrodinger bridge laboratory.

Finite-state log-domain Sinkhorn engine, closed-form Gaussian Riccati engine,
divergence and contraction toolkits, and a seeded experiment harness.
"""

from . import contraction, discrete, divergences, fitting, gaussian, harness, matcore
from .errors import BridgeLabError, DomainError, NumericalError

__all__ = [
    "BridgeLabError",
    "DomainError",
    "NumericalError",
    "contraction",
    "discrete",
    "divergences",
    "fitting",
    "gaussian",
    "harness",
    "matcore",
]

__version__ = "0.1.0"
