"""cryo2d: signal enhancement for 2-D cryo-EM particle stacks.

Pipeline: read stack -> phase-flip -> downsample -> whiten -> steerable PCA
-> invariant nearest-neighbor classes -> spectral class/member grading ->
per-class EM -> graded class averages.
"""

__version__ = "0.1.0"

from .formats import CtfParams, FormatError, MrcStack, read_mrc_stack, read_star_ctf, write_mrc_stack
from .neighbors import AngleGrid, NeighborTable, PairTable
from .spca import SteerableBasis, SteerableCoeffs

__all__ = [
    "CtfParams",
    "FormatError",
    "MrcStack",
    "read_mrc_stack",
    "read_star_ctf",
    "write_mrc_stack",
    "AngleGrid",
    "NeighborTable",
    "PairTable",
    "SteerableBasis",
    "SteerableCoeffs",
    "__version__",
]
