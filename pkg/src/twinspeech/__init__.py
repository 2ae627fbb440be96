"""Barlow Twins and Modified Barlow Twins objectives for speech representations."""
from .augment import AugmentationPolicy, AugmentOp, ViewPair, make_views
from .checkpoint import Checkpoint
from .config import RunConfig
from .data import DatasetManifest, FeatureSet, subsample
from .dsp import AudioClip, FrontendConfig, featurize_clip, log_mel, resample, segment
from .estimators import LogMelFeaturizer, SpeechClassifier, TwinEncoder
from .exceptions import TwinSpeechError
from .harness import EvalReport, run_grid, top1_accuracy
from .model import Architecture, ModelParams
from .objective import bt_correlation, bt_loss, loss_grad, mbt_correlation
from .pipeline import FinetuneConfig, TrainConfig, finetune, pretrain, train_scratch_baseline

__version__ = "0.1.0"

__all__ = [
    "Architecture", "AudioClip", "AugmentOp", "AugmentationPolicy", "Checkpoint", "DatasetManifest",
    "EvalReport", "FeatureSet", "FinetuneConfig", "FrontendConfig", "LogMelFeaturizer", "ModelParams",
    "RunConfig", "SpeechClassifier", "TrainConfig", "TwinEncoder", "TwinSpeechError", "ViewPair",
    "bt_correlation", "bt_loss", "featurize_clip", "finetune", "log_mel", "loss_grad", "make_views",
    "mbt_correlation", "pretrain", "resample", "run_grid", "segment", "subsample", "top1_accuracy",
    "train_scratch_baseline",
]
