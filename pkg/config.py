import os

from errors import ConfigError

# Resolution limits
# Dense operators on V_N have (2^(N+1)-1)^2 rows; N=6 (16129 rows) is the practical ceiling.
DEFAULT_MAX_RESOLUTION = 6
MAX_RESOLUTION_ENV = "HARDY_FACTOR_MAX_N"

# Deepest dyadic level split() will produce
MAX_INTERVAL_LEVEL = 60

# Tolerances
NORM_TOLERANCE = 1e-12
PROJECTION_TOLERANCE = 1e-11
CONTRACTION_MARGIN = 1e-10
RESIDUAL_TOLERANCE = 1e-9
NEUMANN_TOLERANCE = 1e-10
NEUMANN_TERMS = 50

# Exhaustive sign enumeration: at most 2^14 patterns per axis
ENUMERATION_CAP = 14

# Monte Carlo
MIN_MC_TRIALS = 100

# Serialization
BASIS_ORDER = "canonical-v1"
GRAM_MAGIC = b"HFGM"
GRAM_VERSION = 1


def get_max_resolution() -> int:
    """Resolution ceiling, overridable through HARDY_FACTOR_MAX_N"""
    raw = os.getenv(MAX_RESOLUTION_ENV)
    if raw is None or raw.strip() == "":
        return DEFAULT_MAX_RESOLUTION
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"{MAX_RESOLUTION_ENV} must be an integer, got '{raw}'")
    if value < 0:
        raise ConfigError(f"{MAX_RESOLUTION_ENV} must be nonnegative, got {value}")
    return value
