"""Constants for the pixel contrast package."""

from __future__ import annotations

import logging

_LOGGER = logging.getLogger(__package__)

# Segmentation convention for unlabeled pixels
IGNORE_LABEL = 255

# Norm floor below which a vector has no direction
NORM_EPS = 1e-12

# Tolerance used when checking stored vectors are unit length
UNIT_NORM_TOL = 1e-9

# Contrastive loss defaults
DEFAULT_TEMPERATURE = 0.1
DEFAULT_LAMBDA = 1.0

# Memory bank defaults: V pixels per class per image, queue of T = 10 * N entries
DEFAULT_PIXELS_PER_CLASS = 10
QUEUE_SIZE_PER_IMAGE = 10

# Sampling defaults
DEFAULT_K_POS = 1024
DEFAULT_K_NEG = 2048
DEFAULT_ANCHORS_PER_CLASS = 50
DEFAULT_SEMI_HARD_FRACTION = 0.10

# Optimizer defaults
DEFAULT_MOMENTUM = 0.9
DEFAULT_WEIGHT_DECAY = 0.0005
DEFAULT_LR_POWER = 0.9
DEFAULT_BASE_LR = 0.01

# Toy network dimensions
DEFAULT_FEATURE_DIM = 8
DEFAULT_HIDDEN_DIM = 32
DEFAULT_EMBED_DIM = 16
DEFAULT_PROJ_DIM = 16
DEFAULT_NUM_CLASSES = 5

# Trainer defaults
DEFAULT_BATCH_SIZE = 4
DEFAULT_TOTAL_ITER = 2000
DEFAULT_EVAL_INTERVAL = 100
DEFAULT_EMBEDDING_MAX_PAIRS = 20000

# Synthetic data defaults
DEFAULT_NUM_IMAGES = 64
DEFAULT_IMAGE_SIZE = 32
DEFAULT_NOISE_SIGMA = 0.3
DEFAULT_OFFSET_AMPLITUDE = 1.0
DEFAULT_OFFSET_CYCLES = 0.5
TEST_SPLIT_MODULUS = 5  # one image in five goes to the test split

# Gradient modes
GRAD_MODE_EXACT = "exact"
GRAD_MODE_EQ5 = "eq5"
GRAD_MODES = (GRAD_MODE_EXACT, GRAD_MODE_EQ5)

# Contrast ablations
ABLATION_BASELINE_CE = "baseline_ce"
ABLATION_INTRA_IMAGE = "intra_image"
ABLATION_INTER_IMAGE = "inter_image"
ABLATIONS = (ABLATION_BASELINE_CE, ABLATION_INTRA_IMAGE, ABLATION_INTER_IMAGE)

# Memory modes
MEMORY_NONE = "none"
MEMORY_PIXEL = "pixel"
MEMORY_REGION = "region"
MEMORY_BOTH = "both"
MEMORY_MODES = (MEMORY_NONE, MEMORY_PIXEL, MEMORY_REGION, MEMORY_BOTH)

# Example sampling strategies
STRATEGY_RANDOM = "random"
STRATEGY_HARDEST = "hardest"
STRATEGY_SEMI_HARD = "semi_hard"
STRATEGIES = (STRATEGY_RANDOM, STRATEGY_HARDEST, STRATEGY_SEMI_HARD)

# Anchor sampling modes
ANCHOR_RANDOM = "random"
ANCHOR_SEG_AWARE = "seg_aware"
ANCHOR_MODES = (ANCHOR_RANDOM, ANCHOR_SEG_AWARE)

# Synthetic layouts
LAYOUT_VORONOI = "voronoi"
LAYOUT_BLOBS = "blobs"
LAYOUTS = (LAYOUT_VORONOI, LAYOUT_BLOBS)

# Dataset on-disk format
MANIFEST_FILENAME = "manifest.tsv"
MANIFEST_MAGIC = "# format: pixelcontrast-dataset/1"
PROTOTYPES_FILENAME = "prototypes.f32"
SPLIT_TRAIN = "train"
SPLIT_TEST = "test"

# Run output files
RESOLVED_CONFIG_FILENAME = "resolved.cfg"
METRICS_FILENAME = "metrics.csv"
REPORT_FILENAME = "report.json"
MODEL_CHECKPOINT_FILENAME = "model.ckpt"
MEMORY_CHECKPOINT_FILENAME = "memory.bin"
NONFINITE_CHECKPOINT_FILENAME = "nonfinite.ckpt"
ABLATION_FILENAME = "ablation.csv"

# Gradient check acceptance threshold
GRADCHECK_TOLERANCE = 1e-4

# Ablation grids
GRID_CONTRAST = "contrast"
GRID_MEMORY = "memory"
GRID_SAMPLING = "sampling"
GRID_LAMBDA = "lambda"
GRID_GRAD_MODE = "grad_mode"
GRID_NAMES = (GRID_CONTRAST, GRID_MEMORY, GRID_SAMPLING, GRID_LAMBDA, GRID_GRAD_MODE)
LAMBDA_SWEEP = (0.1, 0.5, 1.0)

# Central difference step and the ReLU kink margin for gradient checks
GRADCHECK_STEP = 1e-6
GRADCHECK_KINK_MARGIN = 1e-4

# CLI exit codes
EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
DEFAULT_GRADCHECK_SEEDS = 20
DEFAULT_ABLATION_SEEDS = 3
