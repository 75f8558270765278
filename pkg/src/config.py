"""
Central Configuration.

Defines default hyperparameters, directory locations, checkpoint format
constants and logging settings used throughout the laboratory.
"""
import os
from pathlib import Path

# --- Directories ---
BASE_DIR = Path(__file__).resolve().parent.parent

RUNS_DIR = Path(os.environ.get("MOPSAN_RUNS_DIR", BASE_DIR / "runs"))
REPORTS_DIR = Path(os.environ.get("MOPSAN_REPORTS_DIR", BASE_DIR / "reports"))
LAYOUTS_DIR = BASE_DIR / "layouts"
CONFIGS_DIR = BASE_DIR / "configs"

DEFAULT_LAYOUT_PATH = LAYOUTS_DIR / "simple.layout"

# --- Environment ---
HORIZON = 400
COOK_TIME = 20  # env steps from the third onion until the soup is ready
SOUP_REWARD = 20.0
NUM_ACTIONS = 6
MAX_ONIONS = 3

# Subgoal rewards for shaped training (never part of the team score)
LOAD_SHAPING = 3.0
DISH_SHAPING = 3.0  # only when the pot holds onions and no other dish is in play
SCOOP_SHAPING = 5.0

# --- Autodiff / optimizer ---
LEARNING_RATE = 3e-4
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
CLIP_NORM = 0.5
SURROGATE_WIDTH = 0.5

# --- Spiking actor (LIF constants) ---
LIF_TAU = 2.0
LIF_DT = 1.0
LIF_V_TH = 0.5
LIF_V_RESET = 0.0
LIF_REFRACTORY = 0
LIF_TIMESTEPS = 8
HIDDEN_SIZES = (64, 64)

# --- Context encoder ---
CONTEXT_SIZE = 5
TOKEN_DIM = 64
ATTENTION_HEADS = 2
HEAD_DIM = 64
FFN_INNER_DIM = 256

# --- MoP / DPP ---
PERSONALITY_COUNT = 12
PERSONALITY_HIDDEN = 64
DPP_FEATURE_DIM = 16
DPP_JITTER = 1e-6
DPP_BETA = 0.5
DPP_META_SAMPLES = 64
IMPORTANCE_LOG_BOUND = 5.0  # ratios outside [e^-5, e^5] are dropped

# --- Training ---
GAMMA = 0.99
BATCH_SIZE = 64
ROLLOUT_LENGTH = 2048
ENTROPY_COEF = 0.01
VALUE_COEF = 0.5
PPO_CLIP = 0.2
PPO_EPOCHS = 4
ETA_UPDATE_PERIOD = 10
CHECKPOINT_INTERVAL = 10  # in rollouts
MAX_NAN_RETRIES = 3

# --- Evaluation ---
EPISODES_PER_CELL = 10
ABLATION_STEPS = 100_000
POOL_NAMES = ("A", "B", "C", "D", "E")
ABLATION_SEEDS = 5

# --- Checkpoint format ---
CHECKPOINT_FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"MOPSANCK"

# --- Logging settings ---
LOG_LEVEL = os.environ.get("MOPSAN_LOG_LEVEL", "INFO")  # DEBUG, INFO, WARNING, ERROR, CRITICAL
LOG_FORMAT = "  %(levelname)-7s | %(message)s"
FILE_LOG_FORMAT = "%(asctime)s %(levelname)-7s %(name)s | %(message)s"
