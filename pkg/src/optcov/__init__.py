"""Diffusion guidance for noisy linear inverse problems with pluggable posterior covariances."""

from .covariance import *  # noqa: F401,F403
from .denoisers import *  # noqa: F401,F403
from .errors import (  # noqa: F401
    CapabilityError,
    DimensionError,
    DomainError,
    OptcovError,
    RangeError,
    SingularityError,
    SolverError,
    ValidationError,
    VerificationError,
)
from .guidance import *  # noqa: F401,F403
from .metrics import *  # noqa: F401,F403
from .operators import *  # noqa: F401,F403
from .oracle import *  # noqa: F401,F403
from .sampler import *  # noqa: F401,F403
from .schedule import *  # noqa: F401,F403
from .solvers import *  # noqa: F401,F403
from .transforms import *  # noqa: F401,F403

__version__ = "0.1.0"
