"""Preprocessing, sampling, evaluation and statistics for PET/CT tumour segmentation.

The library works on :class:`~petseg.volume.Volume3D` objects: a float64
voxel array indexed ``[x, y, z]`` together with its spacing and origin.
"""

from petseg.errors import PetSegError
from petseg.metrics import EvalPair, dsc, dsc_agg, evaluate_set, rank_leaderboard
from petseg.nifti_io import read_nifti, write_nifti
from petseg.stats import StatConfig, bootstrap_dscagg, pvalue_matrix, wilcoxon_signed_rank
from petseg.volume import MaskPair, MultiChannelVolume, Volume3D

__version__ = "0.1.0"

__all__ = [
    "EvalPair",
    "MaskPair",
    "MultiChannelVolume",
    "PetSegError",
    "StatConfig",
    "Volume3D",
    "bootstrap_dscagg",
    "dsc",
    "dsc_agg",
    "evaluate_set",
    "pvalue_matrix",
    "rank_leaderboard",
    "read_nifti",
    "wilcoxon_signed_rank",
    "write_nifti",
]
