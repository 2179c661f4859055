"""Constants for the nightreid package."""
DOMAIN_REAL = "real"
DOMAIN_SYNTHETIC = "synthetic"
DOMAINS = (DOMAIN_REAL, DOMAIN_SYNTHETIC)

ROLE_TRAIN = "train"
ROLE_QUERY = "query"
ROLE_GALLERY = "gallery"
ROLES = (ROLE_TRAIN, ROLE_QUERY, ROLE_GALLERY)

# Parameter partition of the network
SUBNET_SHARED = "shared"
SUBNET_REID = "reid"
SUBNET_RELIGHT = "relight"
SUBNETS = (SUBNET_SHARED, SUBNET_REID, SUBNET_RELIGHT)

# Checkpoint archive
CHECKPOINT_MAGIC = b"NRCKPT01"
CHECKPOINT_FORMAT_VERSION = 1

# Manifest line format
MANIFEST_FIELD_SEP = "|"
MANIFEST_KV_SEP = ":"
MANIFEST_FIELDS = ("path", "pid", "camid", "domain", "role", "pair_path")

# Image statistics
HIST_BINS = 256
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
GRAY_WEIGHTS = (0.299, 0.587, 0.114)

# Environment
ENV_WORK_DIR = "NIGHTREID_WORK_DIR"

# Degradation factors, applied in this order
DEGRADATION_ORDER = ("brightness", "contrast", "saturation", "hue")

# Model presets
PRESETS = {
    "paper": {
        "img_size": [256, 128],
        "patch_size": 16,
        "embed_dim": 768,
        "num_heads": 12,
        "shared_depth": 5,
        "reid_depth": 6,
        "decoder_depth": 6,
    },
    "toy": {
        "img_size": [64, 32],
        "patch_size": 8,
        "embed_dim": 64,
        "num_heads": 4,
        "shared_depth": 2,
        "reid_depth": 2,
        "decoder_depth": 2,
    },
}

# Ablations: multi-domain learning (MD), feature distillation (FD) and
# parameter sharing (PS) switched off in the combinations of the study.
ABLATIONS = {
    "full": {"multi_domain": True, "distill": True, "share_encoder": True},
    "wo_md": {"multi_domain": False, "distill": True, "share_encoder": True},
    "wo_md_ps": {"multi_domain": False, "distill": True, "share_encoder": False},
    "wo_md_fd": {"multi_domain": False, "distill": False, "share_encoder": True},
    "wo_md_fd_ps": {"multi_domain": False, "distill": False, "share_encoder": False},
}

# Metric names logged per step
METRIC_COMPONENTS = ("id", "triplet", "distill", "relight")
EVAL_RANKS = (1, 5, 10)
