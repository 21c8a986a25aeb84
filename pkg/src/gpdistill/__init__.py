"""Auto-labeling of 3D objects with an SVGP teacher distilled into a student classifier.

The pipeline runs objectness detection on RGB-D point clouds, projects the
proposals into the camera image, labels the crops with a sparse variational
Gaussian process trained on a few hand labels, and distills the teacher's
soft labels into a compact student.  Estimators follow the scikit-learn
conventions (``fit`` / ``transform`` / ``predict`` / ``get_params``).
"""
from .camera import BBox2D, CameraModel, cluster_to_bbox, project_point, unproject
from .cloud import PointCloud, VoxelGrid, estimate_normals, load_cloud, save_cloud, voxel_downsample
from .distill import DistillConfig, DistilledStudent, SoftLabel, StudentModel, soften, train_student
from .evaluation import EvalReport, MatchConfig, compute_report, iou, match_detections
from .features import ThumbnailFeatures, extract_features
from .objectness import (ConnectabilityParams, ObjectnessDetector, conditional_cluster,
                         connectability, remove_planes)
from .synth import SceneSpec, generate_scene, random_scene_spec
from .teacher import SVGPClassifier, SVGPModel, TrainConfig, init_svgp, predict_proba, train_teacher

__version__ = "0.1.0"

__all__ = [
    "BBox2D", "CameraModel", "cluster_to_bbox", "project_point", "unproject",
    "PointCloud", "VoxelGrid", "estimate_normals", "load_cloud", "save_cloud", "voxel_downsample",
    "DistillConfig", "DistilledStudent", "SoftLabel", "StudentModel", "soften", "train_student",
    "EvalReport", "MatchConfig", "compute_report", "iou", "match_detections",
    "ThumbnailFeatures", "extract_features",
    "ConnectabilityParams", "ObjectnessDetector", "conditional_cluster", "connectability",
    "remove_planes",
    "SceneSpec", "generate_scene", "random_scene_spec",
    "SVGPClassifier", "SVGPModel", "TrainConfig", "init_svgp", "predict_proba", "train_teacher",
]
