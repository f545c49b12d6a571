"""
Settings
========
Environment-driven defaults for the whole package.
Values come from the process environment, optionally seeded from a `.env` file.
"""

import logging
import os

import torch
from dotenv import load_dotenv

load_dotenv()

# Paths
REPO_DIR = os.path.join(os.path.dirname(__file__), "..")
ORACLE_PATH = os.getenv("LOGACQ_ORACLE_PATH", os.path.join(REPO_DIR, "data", "oracles.tsv"))
RESULTS_DIR = os.getenv("LOGACQ_RESULTS_DIR", "results")

LOG_LEVEL = os.getenv("LOGACQ_LOG_LEVEL", "INFO").upper()

# Monte-Carlo defaults
MC_SAMPLES = int(os.getenv("LOGACQ_MC_SAMPLES", "128"))
MC_SAMPLES_LARGE_Q = int(os.getenv("LOGACQ_MC_SAMPLES_LARGE_Q", "512"))
LARGE_Q = int(os.getenv("LOGACQ_LARGE_Q", "16"))

# GP fitting
FIT_RESTARTS = int(os.getenv("LOGACQ_FIT_RESTARTS", "4"))

# All numerics run in double precision
DTYPE = torch.float64


def configure_logging(level: str | None = None) -> None:
    """Root logger setup, called once by entry points."""
    logging.basicConfig(
        level=getattr(logging, (level or LOG_LEVEL).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def mc_samples_for(q: int) -> int:
    """Default number of posterior draws for a joint batch of size q."""
    return MC_SAMPLES_LARGE_Q if q >= LARGE_Q else MC_SAMPLES
