import os
from dotenv import load_dotenv

load_dotenv()

# Grid / Sensor Configuration
GRID_RESOLUTION_M = float(os.getenv("GRID_RESOLUTION_M", "0.25"))
FORWARD_STEP_M = float(os.getenv("FORWARD_STEP_M", "0.25"))
SENSOR_FOV_DEG = float(os.getenv("SENSOR_FOV_DEG", "90"))
SENSOR_RANGE_M = float(os.getenv("SENSOR_RANGE_M", "3.0"))

# Log-odds Mapping Configuration
LOGODDS_OCC = float(os.getenv("LOGODDS_OCC", "0.9"))
LOGODDS_FREE = float(os.getenv("LOGODDS_FREE", "0.4"))
LOGODDS_SEM = float(os.getenv("LOGODDS_SEM", "0.9"))
LOGODDS_MAX = float(os.getenv("LOGODDS_MAX", "5.0"))
FRONTIER_MIN_CELLS = int(os.getenv("FRONTIER_MIN_CELLS", "3"))
ASSOC_RADIUS_M = float(os.getenv("ASSOC_RADIUS_M", "0.5"))
UNKNOWN_PENALTY = float(os.getenv("UNKNOWN_PENALTY", "2.0"))

# Map Alignment Configuration
RANSAC_ITERATIONS = int(os.getenv("RANSAC_ITERATIONS", "500"))
RANSAC_INLIER_CELLS = float(os.getenv("RANSAC_INLIER_CELLS", "1.5"))
MIN_INLIERS = int(os.getenv("MIN_INLIERS", "4"))
IOU_MIN = float(os.getenv("IOU_MIN", "0.5"))
MIN_OVERLAP_CELLS = int(os.getenv("MIN_OVERLAP_CELLS", "40"))
DESCRIPTOR_RINGS = int(os.getenv("DESCRIPTOR_RINGS", "8"))
DESCRIPTOR_RING_WIDTH = int(os.getenv("DESCRIPTOR_RING_WIDTH", "2"))
CANDIDATE_MAX = int(os.getenv("CANDIDATE_MAX", "80"))
DESCRIPTOR_MAX_DIST = float(os.getenv("DESCRIPTOR_MAX_DIST", "0.35"))
SNAP_TOLERANCE_DEG = float(os.getenv("SNAP_TOLERANCE_DEG", "10.0"))

# Communication Configuration
R_COMM_M = float(os.getenv("R_COMM_M", "5.0"))
COOLDOWN_STEPS = int(os.getenv("COOLDOWN_STEPS", "10"))

# Agent Configuration
MATCH_THRESHOLD = float(os.getenv("MATCH_THRESHOLD", "0.8"))
GOAL_RING_CELLS = int(os.getenv("GOAL_RING_CELLS", "4"))
SAFE_RADIUS_CELLS = int(os.getenv("SAFE_RADIUS_CELLS", "1"))
LOOKAHEAD_CELLS = int(os.getenv("LOOKAHEAD_CELLS", "12"))
HEADING_DEADBAND_DEG = float(os.getenv("HEADING_DEADBAND_DEG", "15"))
EXPLORE_INTENT_SCORE = float(os.getenv("EXPLORE_INTENT_SCORE", "0.5"))

# Evaluation Configuration
CLUSTER_REPRESENTATIVES = int(os.getenv("CLUSTER_REPRESENTATIVES", "5"))
MAX_STEPS = int(os.getenv("MAX_STEPS", "200"))

# System Settings
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
OUTPUT_DIR = os.getenv("OUTPUT_DIR", os.path.join(os.path.dirname(os.path.dirname(__file__)), "data", "runs"))
