"""pagroup: pairwise-affinity encoding, grouping, scoring and evaluation.

The library turns instance masks into dense local pairwise affinities,
groups affinity maps into regions or region hierarchies (connected
components, graph-based hierarchical merging, watershed + ultrametric
contour maps with optional oriented rescoring and spectral
globalization), scores candidate regions by affinity objectness, selects
pseudo-ground-truth masks, and evaluates proposal quality with
COCO-style average recall and precision.
"""

from .masks import (
    DimensionMismatchError,
    InstanceSet,
    OverlapError,
    RunLengthMask,
    bbox,
    boundary_pixels,
    instances_to_labelmap,
    iou,
    labelmap_to_instances,
    mask_area,
    rle_decode,
    rle_encode,
)
from .affinity import (
    AGGREGATION_MODES,
    OFFSETS,
    SupervisionTarget,
    aggregate,
    aggregate_target_1ch,
    build_supervision,
    encode_pa,
    masked_weighted_bce,
    neighbor_validity,
    perturb,
    pos_weight,
)
from .grouping import (
    Arc,
    RegionHierarchy,
    RegionSet,
    SpectralConvergenceError,
    cc_group,
    combine_edges,
    extract_regions,
    gbh_group,
    owt_rescore,
    spectral_globalize,
    symmetric_pair_affinity,
    ucm_build,
    watershed,
)
from .objectness import (
    ObjectnessBreakdown,
    ScoredRegion,
    combine_scores,
    rank_and_select,
    score_o_oln,
    score_o_pa,
)
from .evalkit import (
    IOU_GRID,
    EvalReport,
    average_precision,
    average_recall,
    evaluate_dataset,
    iou_matrix,
    match_greedy,
    oracle_match,
    recall_at_all,
)
from .io_formats import (
    FormatError,
    afm_read,
    afm_write,
    annotation_to_mask,
    dataset_read,
    dataset_write,
    labelmap_read,
    labelmap_write,
    mask_to_annotation,
    render_overlay,
)
from .synth import (
    PlacementError,
    SceneSpec,
    generate_scene,
    oracle_components,
    oracle_o_pa,
    oracle_pair_counts,
)

__version__ = "0.1.0"
