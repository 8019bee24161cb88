"""Run configuration: schema, key=value file parsing and layered merging.

Precedence is defaults < config file < command-line flags.
"""

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import FormatError


class ConfigError(ValueError):
    """Unknown key or invalid value in a run configuration."""


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    seed: int = 0
    # synthetic maps
    n: int = Field(160, ge=1)
    depth: float = Field(1000.0, gt=0)
    tads: int = Field(6, ge=0)
    loops: int = Field(4, ge=0)
    bin_size: int = Field(10_000, gt=0)
    # preprocessing
    ratio: float = Field(1 / 16, gt=0, le=1)
    percentile: float = Field(99.9, gt=0, le=100)
    balance_tol: float = Field(1e-6, gt=0)
    balance_iter: int = Field(1000, ge=1)
    validation_chroms: str = "2,6,10,12"
    test_chroms: str = "4,14,16,20"
    # network
    base_dim: int = Field(32, ge=2)
    blocks_per_stage: int = Field(2, ge=0)
    state_size: int = Field(16, ge=1)
    global_residual: bool = False
    # training
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-4, ge=0)
    lr_schedule: Literal["constant", "cosine"] = "constant"
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    epochs: int = Field(100, ge=0)
    checkpoint_every: int = Field(0, ge=0)
    drop_empty_targets: bool = False
    threads: int = Field(0, ge=0)  # 0 keeps the torch default
    # evaluation
    windowed_ssim: bool = False
    max_distance: int = Field(100, ge=0)
    normalize: Literal["auto", "always", "never"] = "auto"
    # receptive field
    erf_samples: int = Field(8, ge=1)

    @field_validator("validation_chroms", "test_chroms")
    @classmethod
    def _chrom_list(cls, value):
        for token in value.split(","):
            if token.strip() and not token.strip().removeprefix("chr"):
                raise ValueError(f"bad chromosome token {token!r}")
        return value

    def chrom_set(self, key):
        return {t.strip().removeprefix("chr") for t in getattr(self, key).split(",") if t.strip()}

    def dump(self):
        """``key = value`` lines that :func:`parse_config_text` reads back."""
        lines = []
        for key, value in self.model_dump().items():
            if isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def parse_config_text(text):
    """Parse ``key = value`` lines; blank lines and ``#`` comments are ignored."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"expected key = value, got {raw.strip()!r}", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise FormatError("missing key", line=lineno)
        if key in values:
            raise FormatError(f"duplicate key {key!r}", line=lineno)
        values[key] = value
    return values


def _explain(err):
    parts = []
    for item in err.errors():
        key = ".".join(str(p) for p in item["loc"]) or "<config>"
        if item["type"] == "extra_forbidden":
            parts.append(f"unknown config key {key!r}")
        else:
            parts.append(f"invalid value for {key!r}: {item['msg']}")
    return "; ".join(parts)


def build_config(file_values=None, flag_values=None):
    """Merge defaults, file values and flag values (flags win) and validate.

    ``None`` flag values mean "not given on the command line".
    """
    merged = dict(file_values or {})
    merged.update({k: v for k, v in (flag_values or {}).items() if v is not None})
    try:
        return RunConfig(**merged)
    except ValidationError as err:
        raise ConfigError(_explain(err)) from None


def load_config_file(path):
    with open(path) as fh:
        return parse_config_text(fh.read())
