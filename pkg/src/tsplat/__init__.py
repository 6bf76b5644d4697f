"""Semantic-targeted Gaussian splatting: differentiable splat rendering with
identity encodings, depth-prior regularization, and semantic density control
for sparse-view reconstruction of segmented objects."""

from .scene import (Camera, ClassHead, GaussianCloud, GradientSet, ViewBundle,
                    init_class_head, init_random_cloud, validate_scene)
from .render import (ProjectedGaussians, RenderOutput, RenderSettings, composite,
                     project, render)
from .semantics import (GroupingConfig, classify, gaussian_class, grouping_loss,
                        loss_2d, loss_3d)
from .depth import (DepthRegConfig, global_local_loss, hard_depth_loss,
                    multi_scale_depth_loss, normalize_global, normalize_local,
                    soft_depth_loss, soft_hard_loss)
from .photometric import PhotometricConfig, color_loss, psnr, ssim, ssim_metric
from .control import (ControlConfig, DensifyState, accumulate, build_floating_mask,
                      densify, prune, roi_membership)
from .optim import (AdamState, NumericalAbort, OptimizerConfig, TrainResult,
                    TrainSettings, step, total_loss, train)
from .dataio import (DataError, DatasetManifest, LoadedDataset, load_checkpoint,
                     load_dataset, parse_manifest, save_checkpoint, write_manifest)
from .synth import (ObjectSpec, RingSpec, SceneSpec, camera_ring, make_scene,
                    parse_scene_spec, render_dataset)

__version__ = "0.1.0"
