"""
HAPS Hardening Pipeline - Configuration
Tập trung tất cả cấu hình mặc định (hằng số thuật toán + runtime knobs)
"""
import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv()


def _env_bool(name: str, default: bool) -> bool:
    value = os.getenv(name)
    if value is None:
        return default
    return value.strip().lower() in ("1", "true", "yes", "on")


# ============== PIXEL DOMAIN ==============
EPSILON_SCALE = 255.0  # ε quoted on the 0-255 pixel scale
CLIP_MIN = 0.0
CLIP_MAX = 1.0

# ============== PGD ATTACK ==============
PGD_STEP_FACTOR = 1.5  # ε_step = 1.5 * ε / n
N_PGD_TRAIN = 30       # PGD iterations during hardening
N_PGD_EVAL = 200       # PGD iterations during evaluation
EVAL_EPSILON = 8       # l∞ budget for robust accuracy (0-255 scale)
EVAL_RANDOM_START = True
TRAIN_RANDOM_START = False

# ============== HAPS SCHEDULE ==============
EPSILON_LADDER = [1, 2, 4, 8, 16]
TEXT_EPSILON_LADDER = [0.1, 0.2, 0.4, 0.8]  # continuous inputs, scale 1.0
SWEEP_LADDER = [0, 1, 2, 4, 8, 16]
NU_MAX = 0.5            # maximum adversarial fraction ν
BATCH_SIZE = 32         # minibatch size M
ETA_INIT = 0.01         # initial learning rate η_init
ITERATIONS_PER_STAGE = 2000  # T
MOMENTUM = 0.0
ANNEAL_NU = True        # False: K = ⌊ν·M⌋ từ t=1 (ablation ν cố định)
ANNEAL_ETA = True       # False: η = η_init suốt mỗi stage
ADV_COUNT_DIGITS = 9    # làm tròn ν·M·(1−γ) trước floor

# ============== ARCHITECTURE SEARCH ==============
VALID_FRACTION = 0.1
SEARCH_PROXY_EPOCHS = 5
SEARCH_BUDGET = 4
SEARCH_ETA_INIT = 0.05

# ============== RUNTIME ==============
SEED = int(os.getenv("HAPS_SEED", "0"))
OUTPUT_DIR = os.getenv("HAPS_OUTPUT_DIR", "runs")
THREADS = int(os.getenv("HAPS_THREADS", "1"))
EVAL_BATCH_SIZE = int(os.getenv("HAPS_EVAL_BATCH_SIZE", "100"))
LOG_EVERY = int(os.getenv("HAPS_LOG_EVERY", "200"))  # iterations between progress lines
RECORD_WALL_CLOCK = _env_bool("HAPS_RECORD_WALL_CLOCK", False)  # off keeps report CSVs byte-identical

# Model container
MODEL_MAGIC = b"HAPS"
MODEL_FORMAT_VERSION = 1
