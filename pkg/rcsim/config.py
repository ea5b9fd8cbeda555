import logging
import os
from typing import Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel

load_dotenv(override=False)


class Settings(BaseModel):
    """Process-wide settings read from the environment"""
    seed: Optional[int] = None
    log_level: str = "INFO"
    trace_dir: str = "traces"
    matrix_workers: int = 1
    matrix_seeds: int = 5
    signer: Literal["keyed-hash", "ed25519"] = "keyed-hash"


def get_settings() -> Settings:
    """Build settings from RCSIM_* environment variables"""
    seed = os.getenv("RCSIM_SEED")
    return Settings(
        seed=int(seed) if seed not in (None, "") else None,
        log_level=os.getenv("RCSIM_LOG_LEVEL", "INFO"),
        trace_dir=os.getenv("RCSIM_TRACE_DIR", "traces"),
        matrix_workers=int(os.getenv("RCSIM_MATRIX_WORKERS", "1")),
        matrix_seeds=int(os.getenv("RCSIM_MATRIX_SEEDS", "5")),
        signer=os.getenv("RCSIM_SIGNER", "keyed-hash"),
    )


def configure_logging(level: str = "INFO") -> None:
    """Configure root logging once for the CLI and the API"""
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
