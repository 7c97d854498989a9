"""Limited-angle CT reconstruction with ISTA and unrolled Psi-DONet networks.

Set ``PSIDO_DISABLE_NUMBA=1`` before import to force the pure-numpy kernels.
"""

from ._kernels import BACKEND
from .errors import InvalidArgument, NumericalFailure, PsidoError, StorageError

__version__ = "0.1.0"

__all__ = ["BACKEND", "InvalidArgument", "NumericalFailure", "PsidoError", "StorageError",
           "__version__"]
