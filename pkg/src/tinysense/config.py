"""Run configuration: flat key = value files with flag overrides.

Every tunable in the pipeline lives here so experiments are reproducible
from a single file.  Unknown keys are rejected; all values are validated
before any work starts.  docs/CONFIG.md describes each key.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


@dataclass
class RunConfig:
    # global
    seed: int = 0

    # synthetic data
    n_frames: int = 256
    f_dim: int = 32
    t_dim: int = 64
    c_dim: int = 3
    joints: int = 8
    paths: int = 4
    scenes: int = 4
    noise_std: float = 0.01
    train_frac: float = 0.8
    sample_rate_hz: float = 500.0

    # compression model training
    epochs: int = 50
    batch_size: int = 32
    lr: float = 0.001
    momentum: float = 0.9
    optimizer: str = "sgd"
    beta: float = 0.25
    lambda_weight: float = 0.1
    lambda_max: float = 10.0
    codebook_size: int = 256
    embed_dim: int = 16
    downsample: int = 4
    disc_warmup_frac: float = 0.2
    enc_width: int = 24
    est_refine_epochs: int = 80

    # lost-index recovery model
    window: int = 3
    rec_blocks: int = 2
    rec_heads: int = 4
    rec_width: int = 64
    rec_epochs: int = 8
    rec_batch_size: int = 256
    rec_lr: float = 0.003
    rec_optimizer: str = "adam"
    rec_alpha_lo: float = 0.0
    rec_alpha_hi: float = 0.8

    # transport
    t_buf_s: float = 1.0
    frame_rate_hz: float = 8.0
    chunk_indices: int = 128
    frame_timeout_ms: float = 50.0
    net_retries: int = 3

    # evaluation
    epsilon: float = 0.0
    eval_frames: int = 0          # 0 = all test frames
    pck_thresholds: str = "20,30"

    def validate(self) -> "RunConfig":
        checks = [
            (self.n_frames >= 1, "n_frames must be >= 1"),
            (min(self.f_dim, self.t_dim, self.c_dim) >= 1, "frame dims must be >= 1"),
            (self.joints >= 1, "joints must be >= 1"),
            (self.paths >= 1, "paths must be >= 1"),
            (self.scenes >= 1, "scenes must be >= 1"),
            (self.noise_std >= 0, "noise_std must be >= 0"),
            (0.0 < self.train_frac < 1.0, "train_frac must be in (0,1)"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.lr >= 0, "lr must be >= 0"),  # 0 = evaluate losses, never update
            (0.0 <= self.momentum < 1.0, "momentum must be in [0,1)"),
            (self.optimizer in ("sgd", "adam"), "optimizer must be sgd or adam"),
            (self.beta >= 0, "beta must be >= 0"),
            (self.lambda_weight >= 0, "lambda_weight must be >= 0"),
            (self.lambda_max > 0, "lambda_max must be > 0"),
            (2 <= self.codebook_size <= 1024, "codebook_size must be in [2,1024]"),
            (self.embed_dim >= 1, "embed_dim must be >= 1"),
            (self.downsample >= 1 and (self.downsample & (self.downsample - 1)) == 0,
             "downsample must be a power of 2"),
            (0.0 <= self.disc_warmup_frac <= 1.0, "disc_warmup_frac must be in [0,1]"),
            (self.enc_width >= 1, "enc_width must be >= 1"),
            (self.est_refine_epochs >= 0, "est_refine_epochs must be >= 0"),
            (2 <= self.window <= 5, "window must be in [2,5]"),
            (self.rec_blocks >= 1, "rec_blocks must be >= 1"),
            (self.rec_heads >= 1, "rec_heads must be >= 1"),
            (self.rec_width % self.rec_heads == 0, "rec_width must divide by rec_heads"),
            (self.rec_epochs >= 1, "rec_epochs must be >= 1"),
            (self.rec_batch_size >= 1, "rec_batch_size must be >= 1"),
            (self.rec_lr > 0, "rec_lr must be > 0"),
            (self.rec_optimizer in ("sgd", "adam"), "rec_optimizer must be sgd or adam"),
            (0.0 <= self.rec_alpha_lo <= self.rec_alpha_hi <= 1.0,
             "rec_alpha range must satisfy 0 <= lo <= hi <= 1"),
            (self.t_buf_s > 0, "t_buf_s must be > 0"),
            (self.frame_rate_hz > 0, "frame_rate_hz must be > 0"),
            (self.chunk_indices >= 1, "chunk_indices must be >= 1"),
            (self.frame_timeout_ms > 0, "frame_timeout_ms must be > 0"),
            (self.net_retries >= 0, "net_retries must be >= 0"),
            (0.0 <= self.epsilon <= 1.0, "epsilon must be in [0,1]"),
            (self.eval_frames >= 0, "eval_frames must be >= 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        if self.f_dim % self.downsample or self.t_dim % self.downsample:
            raise ConfigError(
                f"f_dim/t_dim ({self.f_dim},{self.t_dim}) must divide by downsample "
                f"{self.downsample}")
        self.pck_list()  # parses or raises
        return self

    def pck_list(self) -> list[float]:
        try:
            vals = [float(v) for v in self.pck_thresholds.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"bad pck_thresholds {self.pck_thresholds!r}") from None
        if not vals or any(v <= 0 for v in vals):
            raise ConfigError("pck_thresholds must be positive numbers")
        return vals


_FIELDS = {f.name: f.type for f in fields(RunConfig)}
_PARSERS = {"int": int, "float": float, "str": str, "bool": _bool}


def config_keys() -> list[str]:
    return list(_FIELDS)


def describe_defaults() -> str:
    cfg = RunConfig()
    return "\n".join(f"  {name} = {getattr(cfg, name)}" for name in _FIELDS)


def parse_value(key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    parser = _PARSERS[_FIELDS[key]]
    try:
        return parser(raw)
    except (ValueError, TypeError):
        raise ConfigError(f"bad value {raw!r} for key {key!r} "
                          f"(expected {_FIELDS[key]})") from None


def load_config_file(path) -> dict[str, object]:
    """Parse `key = value` lines; '#' starts a comment; blank lines ignored."""
    values: dict[str, object] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        values[key] = parse_value(key, raw)
    return values


def build_config(file_path=None, overrides: dict[str, object] | None = None) -> RunConfig:
    """File values first, then explicit overrides; validates the result."""
    merged: dict[str, object] = {}
    if file_path is not None:
        merged.update(load_config_file(file_path))
    for key, val in (overrides or {}).items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        merged[key] = val
    return RunConfig(**merged).validate()
