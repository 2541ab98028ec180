"""Compositional multi-asset 3D scene generation with flow matching over voxel latents."""
__version__ = "0.1.0"

from .geomath import Pose8, VoxelGrid
from .latents import SparseLatent
from .model import AblationFlags, ModelConfig, SceneModel
from .numerics import Tensor
from .sampler import SampleConfig, sample_scene, sample_scene_multiview
from .synth import SceneSample, generate_corpus, generate_scene
from .trainer import TrainConfig, Trainer

__all__ = [
    "AblationFlags", "ModelConfig", "Pose8", "SampleConfig", "SceneModel", "SceneSample", "SparseLatent",
    "Tensor", "TrainConfig", "Trainer", "VoxelGrid", "generate_corpus", "generate_scene", "sample_scene",
    "sample_scene_multiview", "__version__",
]
