"""Color-driven cross-modal adversarial patches for paired visible/infrared detection.

The package covers a thermal rendering model, a learned RGB->infrared pixel
adapter, differentiable patch compositing with physical transforms, the
adversarial objective, a detector gateway with toy white-box victims, the
paired dataset pipeline, the patch optimiser and an evaluation harness.
"""
from .adapter import RGBToIRAdapter, load_adapter, predict_ir_torch, sample_pixel_pairs, save_adapter, train_adapter
from .attack import AttackConfig, Patch, PatchAttack, apply_patch, init_patch, load_patch, save_patch, train_patch
from .compositor import (EotConfig, Placement, TransformSample, composite, placement_from_bbox, sample_transform,
                         warp_patch)
from .data import (DatasetManifest, ImagePair, SyntheticConfig, gen_synthetic_dataset, load_dataset, load_pairs,
                   multiscale_clip)
from .errors import *  # noqa: F401,F403
from .evaluation import (AsrReport, TransferMatrix, ablation_suite, baseline_patches, compute_asr, emit_report,
                         multiscale_test_split, threshold_sweep, transfer_eval)
from .losses import LossWeights, adv_loss, ap_loss, tv_loss
from .thermal import (SceneConditions, ThermalCameraConfig, ThermalParams, ThermalRenderer, color_to_absorptivity,
                      render_synthetic_ir, surface_temperature, temperature_to_intensity)

__version__ = "0.1.0"
