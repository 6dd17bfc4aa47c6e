"""flowseg: unsupervised motion segmentation of optical-flow volumes."""

__version__ = "0.1.0"

from .flow_io import (FlowField, FlowVolume, flow_to_hsv, normalize_coords,
                      read_flo, resample, write_flo)
from .motion_model import (PolyTimeMotionModel, SplineBasis, SplineMotionModel,
                           build_basis, control_point_count, eval_quadratic,
                           eval_spline_flow, fit_spline_model)
from .segmenter import (LossBreakdown, SegmentationResult, SegmenterConfig,
                        background_label, consistency_loss, hard_labels,
                        occlusion_threshold, reconstruction_loss, segment,
                        total_loss)
from .evaluation import (boundary_f, bootstrap_iou, davis_aggregate,
                         hungarian_sequence_match, jaccard,
                         linear_assignment_score, select_foreground_subset)
from .synthgen import (RegionSpec, SceneSpec, add_global_flow, corrupt_flows,
                       generate, inject_temporal_discontinuity,
                       random_spline_model, translation)
