"""Dataless model merging toolkit.

Merges independently fine-tuned checkpoints in parameter space using simple
averaging, Fisher-weighted averaging or the closed-form regression-mean
solve over released Gram statistics, and ships a desk-scale model zoo plus
an evaluation harness for the non-iid / multi-domain protocols.
"""

__version__ = "0.1.0"

from .merge import MergeConfig, MergeReport, merge, merge_fisher, merge_regmean, merge_simple
from .tensorfile import (FisherStats, GramStats, NamedTensorMap, read_checkpoint,
                         read_stats, write_checkpoint, write_stats)

__all__ = [
    "MergeConfig", "MergeReport", "merge", "merge_simple", "merge_fisher",
    "merge_regmean", "NamedTensorMap", "GramStats", "FisherStats",
    "read_checkpoint", "write_checkpoint", "read_stats", "write_stats",
    "__version__",
]
