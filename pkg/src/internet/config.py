"""Training configuration and its flat ``key = value`` file format.

One ``key = value`` pair per line; ``#`` starts a comment; tuples are
comma separated; booleans are ``true``/``false``. Unknown keys are rejected.
"""
import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

SUPERVISION_SOURCES = ("pseudo_only", "real_only", "both")


@dataclass
class TrainConfig:
    # optimisation
    total_iters: int = 120000
    batch_size: int = 16
    max_lr: float = 3e-4
    weight_decay: float = 1e-5
    pct_start: float = 0.05
    schedule: str = "one-cycle"
    grad_clip: float = 1.0
    seed: int = 0
    # framework switches
    alternation_period: int = 1
    interleaved: bool = True
    use_transfer: bool = True
    supervision_source: str = "both"
    share_displacement: bool = False
    # data
    image_size: int = 128
    rho: float = 32.0
    # losses
    alpha: float = 0.8
    trans_type: str = "perceptual"
    fghomo_type: str = "correlation"
    fghomo_weight: float = 1.0
    backbone: str = "auto"
    perceptual_layers: tuple = ()
    # homography estimation module
    n_iters: int = 6
    radius: int = 4
    widths: tuple = (64, 96)
    feature_dim: int = 256
    head_hidden: int = 128
    head_groups: int = 8
    detach_iterations: bool = False
    # modality transfer module
    gen_channels: int = 32
    window_size: int = 8
    gen_depths: tuple = (2, 2, 2, 2)
    bottleneck_depth: int = 6
    gen_heads: tuple = (1, 2, 4, 8, 16)
    mlp_ratio: float = 4.0
    # distillation
    distill_perturb: bool = True
    distill_init: str = "scratch"
    # bookkeeping
    eval_every: int = 0
    eval_samples: int = 64
    eval_seed: int = 1234
    ckpt_every: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.total_iters <= 0:
            raise ConfigError("total_iters must be positive")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")
        if self.alternation_period <= 0:
            raise ConfigError("alternation_period must be positive")
        if self.supervision_source not in SUPERVISION_SOURCES:
            raise ConfigError(f"supervision_source must be one of {SUPERVISION_SOURCES}")
        if self.schedule not in ("one-cycle", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if not 0 < self.alpha <= 1:
            raise ConfigError("alpha must be in (0, 1]")
        if self.rho < 0:
            raise ConfigError("rho must be non-negative")
        if self.distill_init not in ("scratch", "teacher"):
            raise ConfigError("distill_init must be 'scratch' or 'teacher'")
        if self.n_iters < 1 or self.radius < 1:
            raise ConfigError("n_iters and radius must be >= 1")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return {f.name: list(v) if isinstance(v := getattr(self, f.name), tuple) else v for f in fields(self)}

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d):
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {k: _coerce(known[k], v) for k, v in d.items()}
        return cls(**kwargs)


def _coerce(f, value):
    default = f.default
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            s = str(value).strip().lower()
            if s in ("1", "true", "yes", "on"):
                return True
            if s in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, tuple):
            if isinstance(value, (list, tuple)):
                return tuple(int(x) for x in value)
            s = str(value).strip()
            return tuple(int(x) for x in s.split(",") if x.strip()) if s else ()
        if isinstance(default, int):
            try:
                return int(value)
            except ValueError:
                as_float = float(value)
                if not as_float.is_integer():
                    raise
                return int(as_float)
        if isinstance(default, float):
            return float(value)
        return str(value).strip()
    except ValueError as exc:
        raise ConfigError(f"bad value {value!r} for {f.name}") from exc


def parse_config_text(text):
    d = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        d[key] = value
    return d


def load_config(path=None, overrides=()):
    """Read a config file (optional) and apply ``key=value`` overrides on top."""
    d = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        d.update(parse_config_text(p.read_text()))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        d[k.strip()] = v.strip()
    return TrainConfig.from_dict(d)


def dump_config(config):
    lines = []
    for k, v in config.to_dict().items():
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
