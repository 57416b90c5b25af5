"""
Configuration settings for the structure hashing engine.
"""
import hashlib
import os
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path
from typing import Dict, Optional, Tuple

from dotenv import load_dotenv

from src.errors import ConfigError

# Load environment variables
load_dotenv()

BASE_DIR = Path(__file__).parent.parent

# Logging Configuration
LOG_DIR = BASE_DIR / 'logs'
LOG_LEVEL = os.getenv('POSH_LOG_LEVEL', 'INFO')
LOG_FILE = os.getenv('POSH_LOG_FILE', str(LOG_DIR / 'posh.log'))

# Worker pool / reproducibility
DEFAULT_THREADS = int(os.getenv('POSH_THREADS', '1'))
DEFAULT_SEED = int(os.getenv('POSH_SEED', '0'))

# Remote structure download
PDB_DOWNLOAD_URL = os.getenv('PDB_DOWNLOAD_URL', 'https://files.rcsb.org/download')
API_TIMEOUT = int(os.getenv('API_TIMEOUT', '10'))

# Virtual C-beta weights (a, b, c) from the N/CA/C frame
CBETA_WEIGHTS = (-0.58273431, 0.56802827, -0.54067466)

_CHOICES = {
    'activation': ('relu',),
    'knn_metric': ('ca', 'node_features'),
    'tm_normalization': ('query', 'target', 'max'),
    'scale_mode': ('divide', 'multiply'),
}


@dataclass
class RunConfig:
    """All hyperparameters of a run, with their default values."""

    # Objective
    gamma: float = 0.2
    lam: float = 0.5
    tau: float = 0.07
    n_negatives: int = 62

    # Optimisation
    accumulation: int = 40
    lr: float = 3e-4
    epochs: int = 100
    max_steps: Optional[int] = None
    log_every: int = 10

    # Encoder
    n_layers: int = 6
    code_length: int = 400
    hidden_dim: int = 128
    activation: str = 'relu'

    # Sampling
    rho: float = 0.9
    alpha: float = 0.9

    # Graph construction
    k_nn: int = 30
    knn_metric: str = 'ca'
    n_rbf: int = 16
    rbf_min: float = 0.0
    rbf_max: float = 20.0

    # Similarity / search
    tm_normalization: str = 'query'
    scale_mode: str = 'divide'

    # Ablations
    use_edge_update: bool = True
    use_substructure_sampling: bool = True
    use_length_scaling: bool = True

    cbeta_weights: Tuple[float, float, float] = field(default=CBETA_WEIGHTS)
    seed: int = DEFAULT_SEED

    def validate(self) -> 'RunConfig':
        """Check value ranges; raises ConfigError on the first violation."""
        checks = [
            (self.gamma >= 0, 'gamma must be >= 0'),
            (self.lam >= 0, 'lam must be >= 0'),
            (self.tau > 0, 'tau must be > 0'),
            (self.n_negatives >= 1, 'n_negatives must be >= 1'),
            (self.accumulation >= 1, 'accumulation must be >= 1'),
            (self.lr > 0, 'lr must be > 0'),
            (self.epochs >= 1, 'epochs must be >= 1'),
            (self.max_steps is None or self.max_steps >= 1, 'max_steps must be >= 1'),
            (self.log_every >= 1, 'log_every must be >= 1'),
            (self.n_layers >= 1, 'n_layers must be >= 1'),
            (self.code_length >= 1, 'code_length must be >= 1'),
            (self.hidden_dim > 0, 'hidden_dim must be > 0'),
            (0 < self.rho < 1, 'rho must be in (0, 1)'),
            (0 < self.alpha <= 1, 'alpha must be in (0, 1]'),
            (self.k_nn >= 1, 'k_nn must be >= 1'),
            (self.n_rbf >= 2, 'n_rbf must be >= 2'),
            (self.rbf_max > self.rbf_min, 'rbf_max must exceed rbf_min'),
            (len(self.cbeta_weights) == 3, 'cbeta_weights needs three values'),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        for key, allowed in _CHOICES.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {', '.join(allowed)}")
        return self

    def as_dict(self) -> Dict:
        return asdict(self)

    def digest(self) -> bytes:
        """SHA-256 over the canonical key/value listing."""
        listing = '\n'.join(f"{k}={v!r}" for k, v in sorted(self.as_dict().items()))
        return hashlib.sha256(listing.encode('utf-8')).digest()

    def to_text(self) -> str:
        """Config-file rendering that parse_config_text reads back unchanged."""
        lines = []
        for key, value in self.as_dict().items():
            if isinstance(value, bool):
                value = 'true' if value else 'false'
            elif value is None:
                value = 'none'
            elif isinstance(value, (tuple, list)):
                value = ','.join(repr(float(v)) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        return '\n'.join(lines) + '\n'

    def updated(self, **overrides) -> 'RunConfig':
        """Return a copy with non-None overrides applied."""
        values = self.as_dict()
        for key, value in overrides.items():
            if value is None:
                continue
            if key not in values:
                raise ConfigError(f"Unknown config key: {key}")
            values[key] = value
        values['cbeta_weights'] = tuple(values['cbeta_weights'])
        return RunConfig(**values)


def _coerce(name: str, raw: str, current):
    """Convert a config-file string to the type of the field's default."""
    raw = raw.strip()
    try:
        if name == 'max_steps':
            return None if raw.lower() in ('', 'none') else int(raw)
        if name == 'cbeta_weights':
            parts = tuple(float(p) for p in raw.split(','))
            if len(parts) != 3:
                raise ValueError(raw)
            return parts
        if isinstance(current, bool):
            lowered = raw.lower()
            if lowered in ('1', 'true', 'yes', 'on'):
                return True
            if lowered in ('0', 'false', 'no', 'off'):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"Bad value for {name}: {raw!r}")


def parse_config_text(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    """
    Parse `key = value` lines on top of a base config.

    Args:
        text: Config file contents; `#` starts a comment
        base: Starting values (default: RunConfig())

    Returns:
        Validated RunConfig
    """
    config = base or RunConfig()
    known = {f.name for f in fields(RunConfig)}
    overrides = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        if '=' not in line:
            raise ConfigError(f"Line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split('=', 1))
        if key not in known:
            raise ConfigError(f"Line {lineno}: unknown config key {key!r}")
        overrides[key] = _coerce(key, value, getattr(config, key))
    values = config.as_dict()
    values.update(overrides)
    values['cbeta_weights'] = tuple(values['cbeta_weights'])
    return RunConfig(**values).validate()


def load_config(path: Optional[str], base: Optional[RunConfig] = None) -> RunConfig:
    """Load a key-value config file; None returns the (validated) base."""
    if path is None:
        return (base or RunConfig()).validate()
    try:
        text = Path(path).read_text(encoding='utf-8')
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}")
    return parse_config_text(text, base)
