"""Activity-location identification from mobile-phone sighting data.

Stays extracted from smoothed traces become nodes of a per-user
spatiotemporal graph (spatial relatedness weighted by time-of-day
co-occurrence); modularity-based community detection groups them into
activity locations.
"""

from .baselines import BaselineConfig, dbscan_identify, spatial_constraint_identify
from .community import ActivityLocation, Partition, WeightedGraph, louvain, modularity
from .ingest import GridConfig, parse_records
from .preprocess import OscillationParams, filter_oscillations, smooth_to_trace_points
from .stays import MidnightPolicy, Stay, extract_stays
from .stkg import build_stkg, infer_spatial_relations, infer_temporal_relations
from .synth import SynthConfig, generate_dataset

__version__ = "0.1.0"

__all__ = [
    "ActivityLocation",
    "BaselineConfig",
    "GridConfig",
    "MidnightPolicy",
    "OscillationParams",
    "Partition",
    "Stay",
    "SynthConfig",
    "WeightedGraph",
    "build_stkg",
    "dbscan_identify",
    "extract_stays",
    "filter_oscillations",
    "generate_dataset",
    "infer_spatial_relations",
    "infer_temporal_relations",
    "louvain",
    "modularity",
    "parse_records",
    "smooth_to_trace_points",
    "spatial_constraint_identify",
]
