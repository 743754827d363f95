"""Volumetric shape completion for rigid objects in dynamic scenes."""
from .energy import DataField, DiscreteEnergy, EnergyParams, accumulate_data, energy_gradient, energy_value
from .errors import (
    BadResolution,
    CosectError,
    Divergence,
    EmptyMesh,
    InvalidDepth,
    MalformedDataset,
    MalformedMeshFile,
    MissingPose,
    ShapeMismatch,
)
from .evaluation import EvalResult, evaluate, point_to_mesh_distance, sample_surface
from .mesh import TriMesh, is_closed, load_mesh, marching_cubes, save_mesh
from .scene import Intrinsics, Keyframe, ObjectModel, OrientedPoint, PointSet, Pose, load_sequence
from .solver import SceneFlags, SolveReport, coarse_to_fine_init, optimize_scene, optimize_volume
from .voxgrid import BitGrid, GridSpec, ScalarGrid

__version__ = "0.1.0"
