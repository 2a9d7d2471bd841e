"""AutoLoRA guided diffusion on a toy 2-D mixture."""

from .denoiser import NULL, Condition, DenoiserParams, init_params
from .guidance import GuidanceConfig, Mode, sample, sample_batch
from .lora import LoraAdapter, init_adapter, merge_adapter
from .schedule import NoiseSchedule, make_default_schedule, make_linear_schedule

__version__ = "0.1.0"
