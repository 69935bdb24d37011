"""Appliance detection in smart meter series with a pretrained convolution-transformer classifier."""
from .adf import (ALPHA_GRID, AlphaParameter, DetectionResult, WindowSpec, detect, merge_quantile, slice_series,
                  time_encode, tune_alpha)
from .autograd import Tensor, backward, no_grad
from .data import ConsumptionSeries, LabeledDataset, SplitSpec, SyntheticConfig, load_csv, split, synthesize, undersample
from .finetune import FinetuneConfig, finetune
from .metrics import macro_f1
from .model import TransAppConfig, TransAppModel, load_checkpoint, save_checkpoint
from .pretrain import MaskSpec, PretrainConfig, UnlabeledWindows, generate_mask, masked_mae, pretrain
from .workflow import RunConfig

__version__ = "0.1.0"
