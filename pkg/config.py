"""
Configuration for harmnet
Reads settings from the environment (.env supported) and sets up logging
"""
import logging
import os
import sys
from dataclasses import dataclass
from typing import Optional

import numpy as np
from dotenv import load_dotenv

from errors import ConfigError

# Load environment variables
load_dotenv()

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'
LOG_LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL')

DTYPES = {
    'f32': np.float32,
    'f64': np.float64,
}


@dataclass
class Settings:
    """Runtime settings, environment first, CLI flags override"""
    seed: int = 0
    dtype: str = 'f32'
    log_level: str = 'INFO'
    norb_dir: Optional[str] = None
    output_dir: str = 'results'
    slow_tests: bool = False
    bench_reps: int = 5

    @property
    def np_dtype(self):
        return resolve_dtype(self.dtype)


def get_settings() -> Settings:
    """Build settings from HARMNET_* environment variables"""
    try:
        return Settings(
            seed=int(os.getenv('HARMNET_SEED', '0')),
            dtype=os.getenv('HARMNET_DTYPE', 'f32'),
            log_level=os.getenv('HARMNET_LOG_LEVEL', 'INFO').upper(),
            norb_dir=os.getenv('HARMNET_NORB_DIR') or None,
            output_dir=os.getenv('HARMNET_OUTPUT_DIR', 'results'),
            slow_tests=os.getenv('HARMNET_SLOW_TESTS', '0').lower() in ('1', 'true', 'yes'),
            bench_reps=int(os.getenv('HARMNET_BENCH_REPS', '5')),
        )
    except ValueError as e:
        raise ConfigError(f"invalid HARMNET_* environment value: {e}") from e


def resolve_dtype(name):
    """Map 'f32' / 'f64' (or an equivalent numpy dtype) to a numpy dtype"""
    if not isinstance(name, str):
        return np.dtype(DTYPES[dtype_name(name)])
    try:
        return np.dtype(DTYPES[name])
    except KeyError:
        raise ConfigError(f"unknown dtype '{name}' (expected one of {', '.join(DTYPES)})")


def dtype_name(dtype) -> str:
    dtype = np.dtype(dtype)
    for name, candidate in DTYPES.items():
        if dtype == np.dtype(candidate):
            return name
    raise ConfigError(f"unsupported dtype {dtype}")


def setup_logging(level: Optional[str] = None):
    """Configure the root logger once, on stderr so stdout stays parseable"""
    level = (level or get_settings().log_level).upper()
    if level not in LOG_LEVELS:
        raise ConfigError(f"unknown log level '{level}'")
    logging.basicConfig(level=getattr(logging, level), format=LOG_FORMAT, stream=sys.stderr)
    logging.getLogger().setLevel(getattr(logging, level))
