"""3D instance-segmentation evaluation, postprocessing optimization, and
assisted annotation toolkit."""

__version__ = "0.1.0"

from .errors import Aop3dError
from .metrics import IpqReport, IpqWeights, compute_ipq, compute_pq, evaluate_ipq, match_instances
from .postproc import PostprocParams, apply_postprocessing
from .volume import IntensityVolume, LabelVolume, connected_components, read_volume, write_volume

__all__ = [
    "Aop3dError",
    "IntensityVolume",
    "IpqReport",
    "IpqWeights",
    "LabelVolume",
    "PostprocParams",
    "apply_postprocessing",
    "compute_ipq",
    "compute_pq",
    "connected_components",
    "evaluate_ipq",
    "match_instances",
    "read_volume",
    "write_volume",
]
