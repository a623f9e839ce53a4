# Class-aware prototype clustering
SINKHORN_STEPS = 3
KAPPA = 0.05
MU = 0.9
N_PROTOTYPES = 10
INIT_STD = 0.02
INIT_TRUNCATION = 2.0

# Prototype label matching
WARMUP_ITERS = 1000
ALPHA_PRO = 0.2

# Multi-label cooperative refinement
ALPHA_CLS = 0.2
ALPHA_IOU = 0.5
ALPHA_COL = 0.2
COLLISION_METRICS = ["fraction", "iou"]

# Losses
TAU_CON = 0.1
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
PROB_CLAMP = 1e-7

# ScanNet V2 sized defaults
N_CLASSES = 18
FEATURE_DIM = 128
SEED = 0

NORM_TOL = 1e-6
UNIT_EXACT_TOL = 1e-12
MARGINAL_TOL = 1e-9

# Label statistics
RECALL_IOU_THRESH = 0.25
FAMILIES = ["sparse", "pseudo", "prototype"]
RECALL_TABLE_ROWS = [("sparse",),
                     ("sparse", "prototype"),
                     ("sparse", "pseudo"),
                     ("sparse", "pseudo", "prototype")]
RECALL_TABLE_COLUMNS = ["Sparse Label", "Prototype Labels", "Pseudo Labels",
                        "mAR"]
SWEEP_THRESHOLDS = [0.01, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6]

# Sparse splits
SPARSIFY_MODES = ["one_per_scene", "n_per_scene", "one_per_class_per_scene"]

# Wire formats
FORMAT_VERSION = 1
BANK_HEADER = "PROTOBANK v1"
MANIFEST_FILE = "manifest.json"
SCENE_SUFFIX = ".jsonl"
LABEL_SUFFIX = ".labels.jsonl"
PREDICTIONS_DIR = "predictions"
RECORD_KINDS = ["proposals", "sparse_labels", "gt_labels"]

# CLI exit codes
EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INVARIANT = 2
