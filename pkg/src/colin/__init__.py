"""Multi-branch low-rank adapters with shared factors."""

from .core import (
    AdapterGradients,
    ColinAdapter,
    FusedAdapter,
    ParamCount,
    adapter_backward,
    adapter_forward,
    compose_weight,
    composite_loss,
    fuse,
    orthogonal_loss,
    param_count,
    svd_init,
)
from .linalg import Rng, kaiming_uniform, svd

__version__ = "0.1.0"
