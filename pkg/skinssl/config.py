"""
Configuration for the skinssl tactile-skin self-distillation project

This file contains all project-wide settings and numeric defaults.
Import from this file anywhere in the package or the stage scripts:

    from skinssl.config import DATA_DIR, TAXEL_COUNT, WINDOW_FRAMES, setup_logging

Run-level, per-experiment settings (the JSON RunConfig) draw their defaults
from the constants below; see skinssl/run_config.py.
"""

import hashlib
import logging
import os
from pathlib import Path

from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# =============================================================================
# PROJECT SETTINGS
# =============================================================================
PROJECT_NAME = "skinssl"
PROJECT_VERSION = "1.0.0"
PROJECT_ROOT = Path(__file__).resolve().parent.parent

# =============================================================================
# DIRECTORY PATHS
# =============================================================================
# SKINSSL_CACHE overrides where generated datasets live
DATA_DIR = Path(os.getenv("SKINSSL_CACHE", str(PROJECT_ROOT / "data")))
LOGS_DIR = Path(os.getenv("SKINSSL_LOGS", str(PROJECT_ROOT / "logs")))
RUNS_DIR = Path(os.getenv("SKINSSL_RUNS", str(PROJECT_ROOT / "runs")))
CONFIGS_DIR = PROJECT_ROOT / "configs"

# Dataset subdirectories (one per generated corpus)
PLAY_DIR_NAME = "play"
FORCE_DIR_NAME = "force"
POSE_DIR_NAME = "pose"
JOYSTICK_DIR_NAME = "joystick"

# Output file names
MANIFEST_FILE_NAME = "manifest.json"
METRICS_LOG_NAME = "metrics.jsonl"
ARTIFACTS_FILE_NAME = "artifacts.json"

# =============================================================================
# HAND / SENSOR SETTINGS
# =============================================================================
TAXEL_COUNT = 368
JOINT_COUNT = 16
PAD_COUNT = 18
FINGERTIP_TAXELS = 30
PHALANGE_TAXELS = 16          # 4x4 grid
PALM_TAXELS = 24              # 4x6 grid
FINGERTIP_RADIUS = 0.01       # m, curved pad cylinder radius

# =============================================================================
# SIGNAL PIPELINE SETTINGS
# =============================================================================
RESAMPLE_HZ = 100.0
RESAMPLE_DT = 0.01            # s, 1 / RESAMPLE_HZ
WINDOW_FRAMES = 10            # 0.1 s history per window
WINDOW_STRIDE = 10            # frames between window starts (pretraining)
FLUX_SCALE = 100.0            # raw counts per calibrated unit
LABEL_HZ = 10.0               # pose / joystick label rate

# =============================================================================
# SIMULATOR SETTINGS
# =============================================================================
RAW_COUNTS_PER_UNIT = 100.0   # simulator unit -> raw sensor counts
RAW_RATE_RANGE = (80.0, 100.0)
NOISE_STD = 0.01              # 1% of unit scale
BIAS_RANGE = (-0.05, 0.05)
GAIN_RANGE = (0.9, 1.1)
HEMISPHERE_SIGMA = 0.002      # m
FLAT_INDENTER_RADIUS = 0.003  # m, 6 mm disc
FLAT_SUBKERNEL_SIGMA = 0.0015
FORCE_RANGE = (0.25, 5.0)     # N
PLAY_CLASSES = 8
PLAY_EPISODES_PER_CLASS = 10
PLAY_EPISODE_SECONDS = 120.0
FORCE_PRESSES = 500
FORCE_PRESS_SECONDS = 1.0
POSE_TRAJECTORIES = 120
POSE_EPISODE_SECONDS = 30.0
POSE_TRANSLATION_LIMIT = 0.125      # m
POSE_ROTATION_LIMIT_DEG = 50.0
JOYSTICK_TRAJECTORIES = 817
JOYSTICK_EPISODE_SECONDS = 2.0
GENERATOR_VERSION = "1.0"

# =============================================================================
# ENCODER SETTINGS
# =============================================================================
EMBED_DIM = 192
ENCODER_LAYERS = 12
ENCODER_HEADS = 3
MLP_RATIO = 4
PROTOTYPES_FULL = 65536
PROTOTYPES_DESK = 1024
PAD_TYPES = 3

# =============================================================================
# SELF-DISTILLATION SETTINGS
# =============================================================================
N_GLOBAL_VIEWS = 2
N_LOCAL_VIEWS = 8
GLOBAL_RETENTION = (0.4, 1.0)
LOCAL_RETENTION = (0.1, 0.4)
STUDENT_TEMPERATURE = 0.1
TEACHER_TEMPERATURE = 0.04
CENTER_MOMENTUM = 0.9
PATCH_LOSS_WEIGHT = 1.0
PEAK_LR = 1e-4
WARMUP_EPOCHS = 30
WEIGHT_DECAY_RANGE = (0.04, 0.4)
EMA_RANGE = (0.994, 1.0)
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
CLIP_GRAD = 3.0
PRETRAIN_EPOCHS = 50          # desk default, full.json uses 500
PRETRAIN_BATCH_SIZE = 16      # desk default, full.json uses 64

# =============================================================================
# DOWNSTREAM SETTINGS
# =============================================================================
DOWNSTREAM_LR = 1e-4
DOWNSTREAM_EPOCHS = 100
DOWNSTREAM_BATCH_SIZE = 64
DOWNSTREAM_WEIGHT_DECAY = 0.05
BUDGETS = (0.033, 0.10, 0.33, 1.0)
EVAL_FRACTION = 0.2
FORCE_WINDOW_STRIDE = 5
SEQUENCE_WINDOWS = 10         # 1 s of 10 Hz tokens
SEQUENCE_STEP = 5
POSE_TRANSLATION_THRESHOLD = 0.02   # m
POSE_ROTATION_THRESHOLD_DEG = 5.0

# =============================================================================
# HELPER FUNCTIONS
# =============================================================================

def ensure_directories():
    """Create all necessary directories if they don't exist."""
    for directory in [DATA_DIR, LOGS_DIR, RUNS_DIR]:
        directory.mkdir(parents=True, exist_ok=True)


def sub_seed(root_seed, name):
    """Independent 63-bit seed for the named stream (data, init, masking, ...) of a root seed."""
    digest = hashlib.blake2b(f"{name}:{root_seed}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


def get_log_file(stage_name):
    """Get log file path for a pipeline stage."""
    return LOGS_DIR / f"{stage_name}.log"


def setup_logging(stage_name):
    """Configure logging to file and console."""
    LOGS_DIR.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=logging.INFO,
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(get_log_file(stage_name)),
            logging.StreamHandler()
        ],
        force=True,
    )
    return logging.getLogger(stage_name)


# Print config summary when run directly
if __name__ == "__main__":
    print(f"Project: {PROJECT_NAME} {PROJECT_VERSION}")
    print(f"Project Root: {PROJECT_ROOT}")
    print(f"Data dir: {DATA_DIR}")
    print(f"Runs dir: {RUNS_DIR}")
    print(f"Logs dir: {LOGS_DIR}")
    print()
    print(f"Taxels: {TAXEL_COUNT} over {PAD_COUNT} pads, {JOINT_COUNT} joints")
    print(f"Windows: {WINDOW_FRAMES} frames @ {RESAMPLE_HZ:.0f} Hz")
    print(f"Encoder: d={EMBED_DIM}, {ENCODER_LAYERS} layers, {ENCODER_HEADS} heads")
