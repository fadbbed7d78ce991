import os
from dotenv import load_dotenv

load_dotenv()

class Config:
    # Discretization
    DT = float(os.getenv("HAZARD_DT", 1.0 / 12.0))

    # Kernels
    ICHOL_TOL = float(os.getenv("HAZARD_ICHOL_TOL", 0.001))
    PINV_TOL = float(os.getenv("HAZARD_PINV_TOL", 1e-10))

    # Optimizer
    EPS_STOP = float(os.getenv("HAZARD_EPS_STOP", 1e-2))
    LBFGS_MEMORY = int(os.getenv("HAZARD_LBFGS_MEMORY", 10))
    MAX_ITERS = int(os.getenv("HAZARD_MAX_ITERS", 2000))
    ARMIJO_C = float(os.getenv("HAZARD_ARMIJO_C", 1e-4))
    BACKTRACK = float(os.getenv("HAZARD_BACKTRACK", 0.5))
    MAX_BACKTRACKS = int(os.getenv("HAZARD_MAX_BACKTRACKS", 50))

    # Likelihood / scores
    ETA_CLIP = float(os.getenv("HAZARD_ETA_CLIP", 40.0))
    G_CLIP = float(os.getenv("HAZARD_G_CLIP", 15.0))

    # Cross-fitting
    FOLDS = int(os.getenv("HAZARD_FOLDS", 5))

    # EM
    EM_TOL = float(os.getenv("HAZARD_EM_TOL", 1e-6))
    EM_MAX_ITERS = int(os.getenv("HAZARD_EM_MAX_ITERS", 200))
    EM_STARTS = int(os.getenv("HAZARD_EM_STARTS", 5))

    # Runtime
    N_JOBS = int(os.getenv("HAZARD_N_JOBS", 1))
    LOG_LEVEL = os.getenv("HAZARD_LOG_LEVEL", "INFO")
    OUTPUT_DIR = os.getenv("HAZARD_OUTPUT_DIR", "results")

config = Config()
