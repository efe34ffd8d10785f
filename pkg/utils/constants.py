"""
Common constants and defaults for the simulator.
"""

# File formats
CHECKPOINT_MAGIC = b"SGCK"
CHECKPOINT_VERSION = 1
TRAJECTORY_MAGIC = b"SGTR"
TRAJECTORY_VERSION = 1
TRAJECTORY_SUFFIX = ".sgt"
CHECKPOINT_SUFFIX = ".sgck"
MANIFEST_NAME = "manifest.json"

# Feature conventions
MESH_EDGE_FAMILIES = ("mm", "ee", "em", "me")
NORMALIZER_FAMILIES = (
    "node_m", "node_e", "edge_mm", "edge_ee", "edge_em", "edge_me",
    "target_m", "target_e",
)

# Numerical floors
NORMALIZER_EPS = 1e-8
LAYER_NORM_EPS = 1e-8
DEGENERATE_VOLUME_TOL = 1e-12

# Training defaults
DEFAULT_LATENT = 128
DEFAULT_HIDDEN_LAYERS = 2
DEFAULT_LR = 1e-4
DEFAULT_LR_FINAL = 1e-6
DEFAULT_LAMBDA_REG = 1e-4
DEFAULT_VALIDATE_EVERY = 500
DEFAULT_LOG_EVERY = 100
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# Dataset split proportions (train / valid / test)
DEFAULT_SPLIT = (1000, 100, 100)

# Metric log
METRIC_COLUMNS = ["step", "train_loss", "valid_rmse", "wall_time"]
METRIC_HEADER = (
    "# train_loss: squared normalized delta error summed over free mesh nodes and all "
    "element nodes, divided by the node count of both families, "
    "averaged over the batch; valid_rmse: sqrt of mean over rollout steps x "
    "non-prescribed mesh nodes x coordinates, averaged over validation trajectories"
)
