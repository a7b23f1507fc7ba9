"""Oriented-box detection toolkit: geometry, target coding, losses, feature fusion,
post-processing and evaluation for two-stage fine-grained oriented detectors."""

__version__ = "0.1.0"

from .geometry import (  # noqa: F401
    ConvexPolygon,
    InvalidBoxError,
    OrientedBox,
    aabb_of,
    canonicalize,
    convex_hull,
    convex_polygon_intersection,
    corners,
    mc_iou_oracle,
    point_in_box,
    rotated_giou,
    rotated_iou,
)
from .coding import (  # noqa: F401
    AssignmentResult,
    BoxTarget,
    PointGrid,
    assignment_oracle,
    atss_assign,
    decode_box,
    encode_box,
    generate_anchor_points,
)
from .losses import LossParams, arl, focal_loss, giou_loss, joint_quality, reduce_batch  # noqa: F401
from .postproc import Detection, horizontal_nms, rotated_nms, score_filter, select_proposals  # noqa: F401
from .evaluation import (  # noqa: F401
    EvalConfig,
    EvalReport,
    GroundTruth,
    ap_voc07,
    ap_voc12,
    average_recall,
    confusion_matrix,
    evaluate_dataset,
    match_detections,
    pr_curve,
    recall_at,
)
