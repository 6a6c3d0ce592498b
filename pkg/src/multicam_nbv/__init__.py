"""Multi-camera UAV exploration simulator: ray-cast sensing, semantic voxel
mapping, receding-horizon next-best-view planning and camera-count trade-offs."""

from multicam_nbv.scene import ClassTable, LabeledBox, RayHit, Scene, load_scene, make_drydock, ray_cast, save_scene
from multicam_nbv.sensor import CameraIntrinsics, CameraMount, Pose, Rig, default_rig
from multicam_nbv.mapping import VoxelMap
from multicam_nbv.planner import PlannerParams, plan_next
from multicam_nbv.harness import ExperimentConfig, PowerModel, run_episode, run_experiment, select_design

__all__ = [
    "CameraIntrinsics",
    "CameraMount",
    "ClassTable",
    "ExperimentConfig",
    "LabeledBox",
    "PlannerParams",
    "Pose",
    "PowerModel",
    "RayHit",
    "Rig",
    "Scene",
    "VoxelMap",
    "default_rig",
    "load_scene",
    "make_drydock",
    "plan_next",
    "ray_cast",
    "run_episode",
    "run_experiment",
    "save_scene",
    "select_design",
]
