"""Edge-guided segmentation refinement and surgical workflow simulation."""

__version__ = "0.1.0"

from .edgedet import EdgeDetectorConfig, EdgeMap, detect_edges, gradient_magnitude
from .errors import NahidError
from .raster import (
    GrayImage,
    LabelImage,
    ProbMap,
    Rotation,
    decode_image,
    decode_pmap,
    encode_image,
    encode_pmap,
    rotate_quarter,
)
from .sinafuse import (
    RegionMap,
    RegionRecord,
    assign_edge_pixels,
    majority_label,
    partition_regions,
    refine,
    refine_with_edges,
    to_label_image,
)
from .sinatree import (
    Pose,
    SinaTree,
    TaskDescriptor,
    TreeNode,
    find_path,
    insert_intermediate,
    nearest_node,
    validate,
)

__all__ = [
    "EdgeDetectorConfig",
    "EdgeMap",
    "GrayImage",
    "LabelImage",
    "NahidError",
    "Pose",
    "ProbMap",
    "RegionMap",
    "RegionRecord",
    "Rotation",
    "SinaTree",
    "TaskDescriptor",
    "TreeNode",
    "assign_edge_pixels",
    "decode_image",
    "decode_pmap",
    "detect_edges",
    "encode_image",
    "encode_pmap",
    "find_path",
    "gradient_magnitude",
    "insert_intermediate",
    "majority_label",
    "nearest_node",
    "partition_regions",
    "refine",
    "refine_with_edges",
    "rotate_quarter",
    "to_label_image",
    "validate",
]
