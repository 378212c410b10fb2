"""Closed-loop acoustic feedback simulation and in-loop feedback control for speech enhancement."""
from .signals import MonoSignal, MultiSignal, Spectrogram, StftConfig, istft, stft
from .room import FeedbackPathSet, RoomSpec, build_feedback_paths, glasses_geometry, simulate_rir
from .loop import LoopConfig, LoopRun, run_controlled_loop, run_default_loop
from .crn import CrnConfig, init_params, load_checkpoint, save_checkpoint
from .metrics import evaluate_run, howling_incidence, ptpr_frames, sweep

__version__ = "0.1.0"
