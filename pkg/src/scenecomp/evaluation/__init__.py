"""Rigid registration and geometric scene metrics."""
from .metrics import (EMPTY_CD, EMPTY_FSCORE, EMPTY_IOU, EvalConfig, MetricReport, SceneGeometry, align,
                      chamfer, chamfer_brute, evaluate_clouds, evaluate_scene, fscore, markdown_table,
                      mean_summary, nn_distances, normalize_scene, paired_benchmark, pca_rotations,
                      perturbed_prediction, read_reports, scene_collision, write_reports)
from .registration import (REGISTRATIONS, FilterReg, Registration, RegistrationError, kabsch, register,
                           register_filterreg, register_icp)

__all__ = [
    "EMPTY_CD", "EMPTY_FSCORE", "EMPTY_IOU", "EvalConfig", "FilterReg", "MetricReport", "REGISTRATIONS",
    "Registration", "RegistrationError", "SceneGeometry", "align", "chamfer", "chamfer_brute",
    "evaluate_clouds", "evaluate_scene", "fscore", "kabsch", "markdown_table", "mean_summary",
    "nn_distances", "normalize_scene", "paired_benchmark", "pca_rotations", "perturbed_prediction",
    "read_reports", "register", "register_filterreg", "register_icp", "scene_collision", "write_reports",
]
