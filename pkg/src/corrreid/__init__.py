"""Set-level correlation features for re-identification retrieval.

Items are encoded into a global feature and part-local features, correlated
across the whole input set (landmark affinity with reciprocal sparse attention
for the global path, a momentum memory bank with a clustering loss for the
local path), fused by multi-scale channel attention and evaluated with CMC and
mAP.
"""
from corrreid.kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
