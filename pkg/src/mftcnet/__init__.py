"""Multi-aperture Swin/convolution fusion network for 3D multi-organ segmentation."""
from .aperture import AperturePyramid, AugmentConfig, build_aperture_pyramid, center_crop, sample_patch
from .distance import boundary, signed_distance_transform, surface_indicator
from .fusion import CBAM, ConvModule, FusionBlock, SEBlock, fuse
from .losses import LossConfig, dice_ce, dist_loss_term, loss_terms, total_loss
from .metrics import MetricsReport, dice_score, evaluate_case, hd95, sliding_window_inference
from .model import MFTCNet, ModelConfig, param_count, component_sweep
from .swin3d import SwinConfig, SwinEncoder, WindowAttention
from .trainer import Checkpoint, TrainConfig, Trainer, kfold_split, run_ablation, train_fold
from .volio import LabelVolume, PhantomSpec, Volume, generate_phantom, read_volume, write_volume

__version__ = "0.1.0"
