"""SilentWear: wearable-EMG silent speech command recognition."""

__version__ = "0.1.0"

from silentwear.config import ConfigManager, RunConfig, get_settings
from silentwear.database import Registry, get_registry
from silentwear.emgio import CommandLabel, Condition, EmgRecording, read_recording, write_recording
from silentwear.evalharness import run_incremental_a, run_incremental_b, run_setting, window_ablation
from silentwear.metrics import balanced_accuracy, confusion, itr
from silentwear.quantize import calibrate_and_quantize, load_quantized, save_quantized
from silentwear.reporter import ReportGenerator
from silentwear.speechnet import SpeechNet, build_speechnet
from silentwear.streamrt import stream_classify
from silentwear.training import fine_tune, train

__all__ = [
    "__version__",
    "ConfigManager",
    "RunConfig",
    "get_settings",
    "Registry",
    "get_registry",
    "CommandLabel",
    "Condition",
    "EmgRecording",
    "read_recording",
    "write_recording",
    "run_setting",
    "run_incremental_a",
    "run_incremental_b",
    "window_ablation",
    "balanced_accuracy",
    "confusion",
    "itr",
    "calibrate_and_quantize",
    "load_quantized",
    "save_quantized",
    "ReportGenerator",
    "SpeechNet",
    "build_speechnet",
    "stream_classify",
    "fine_tune",
    "train",
]
