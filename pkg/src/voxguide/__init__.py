"""Voxel-guided ray sampling for neural radiance fields, in numpy."""

from .field import FieldConfig, FieldParams, field_backward, field_forward, init_params, load_checkpoint, save_checkpoint
from .loss import LossConfig, robust_depth_loss, smoothness_reg
from .raycast import Camera, Ray, first_hit, first_hit_batch
from .render import composite, render_image, render_ray
from .sampler import SamplerConfig, sample_guided, sample_uniform
from .svo import PointCloud, SparseVoxelOctree, build_octree, morton_decode, morton_encode
from .synth import make_dataset, toy_room
from .train import TrainConfig, train

__version__ = "0.1.0"
