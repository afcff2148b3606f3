"""Dyadic-cube extensions of manifold-valued traces to the half-space."""
from .boundary_data import BoundaryMap, SingularSet, gagliardo_seminorm
from .dyadic_geometry import CubeId, DyadicDecomposition, GeometryError, validate_descending
from .harness import RunReport, Scenario, oracle_lifting_extension, run_scenario, verify_counts
from .linear_extension import classify, extension_eval, mollifier
from .singular_complex import (
    BadRegion,
    ConstructionError,
    propagate_and_decay,
    spawn_over_singular_set,
    supercritical_propagate,
)
from .skeleton_extension import (
    ExtensionField,
    NoFill,
    PipelineConfig,
    assemble_subcritical,
    assemble_supercritical,
    energy,
    skeleton_extend,
    trace_defect,
)
from .targets import ProjectionOutOfRange, TargetManifold, circle, sphere

__all__ = [
    "BadRegion", "BoundaryMap", "ConstructionError", "CubeId", "DyadicDecomposition", "ExtensionField",
    "GeometryError", "NoFill", "PipelineConfig", "ProjectionOutOfRange", "RunReport", "Scenario",
    "SingularSet", "TargetManifold", "assemble_subcritical", "assemble_supercritical", "circle", "classify",
    "energy", "extension_eval", "gagliardo_seminorm", "mollifier", "oracle_lifting_extension",
    "propagate_and_decay", "run_scenario", "skeleton_extend", "sphere", "spawn_over_singular_set",
    "supercritical_propagate", "trace_defect", "validate_descending", "verify_counts",
]
