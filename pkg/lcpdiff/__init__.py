from .tensor import Tensor, FourierSpec, fourier_encode_box, softmax_rows, scaled_dot_attention
from .autodiff import DiffNode, backward
from .config import RunConfig, ModelConfig, GuidanceConfig, ScheduleConfig, SamplerConfig, DatasetConfig, TrainConfig, EvalConfig, load_config
from .layout import BoundingBox, GroundingTokens, AttentionStack, position_loss, scale_loss, layout_loss, guided_update, step_size
from .attention import AdapterParams, static_attention, grounding_attention, dynamic_cross_attention
from .encoder import SubjectReference, StaticDetailFeatures, encode_dynamic, refine_static, augment, make_frame_pair
from .diffusion import NoiseSchedule, make_schedule, add_noise, ddim_step, guided_eps
from .denoiser import DenoiserParams, Conditioning, denoiser_forward
from .model import SubjectInput, build_params, encode_subjects
from .sampler import SampleRequest, sample, sample_many
from .training import AdamW, training_step, pretrain_step, train
from .checkpoint import save_checkpoint, load_checkpoint
from .data import ShapeSpec, SceneAnnotation, RequestRecord, generate_scene, tokenize_prompt
from .evaluate import Detection, APReport, iou, compute_ap, detect_blobs
from .utils import LcpException

__version__ = '0.1.0'
