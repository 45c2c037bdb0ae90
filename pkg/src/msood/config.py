"""Training configuration and its canonical content hash.

Kept separate from the trainer so the objective and detector can consume a
config without importing optimizer code.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

from .alignment import AlignmentConfig
from .errors import ConfigError

__all__ = [
    "AblationFlags",
    "TrainConfig",
    "config_hash",
]

MAX_SEED = 2 ** 63


@dataclass
class AblationFlags:
    """Switches that disable individual model mechanisms for comparison runs.

    ``disable_ood_loss`` drops the pseudo-outlier entropy term entirely;
    ``disable_entropy_gain_selection`` replaces top-K entropy-gain patch
    selection with a uniform random draw; ``disable_cross_scale_fusion``
    skips cosine-weighted feature fusion; ``disable_lower_scale_propagation``
    reuses high-scale pseudo features at every scale instead of walking
    them down the hierarchy.
    """

    disable_ood_loss: bool = False
    disable_entropy_gain_selection: bool = False
    disable_cross_scale_fusion: bool = False
    disable_lower_scale_propagation: bool = False

    @classmethod
    def from_dict(cls, data: dict) -> "AblationFlags":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown ablation flags: {unknown}")
        for key, value in data.items():
            if not isinstance(value, bool):
                raise ConfigError(f"ablation flag {key} must be a bool, got {value!r}")
        return cls(**data)


@dataclass
class TrainConfig:
    """Everything that determines a training run besides the data itself."""

    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 100
    k: int = 4
    n: int = 2
    tau: float = 0.01
    lambda_ood: float = 1.0
    seed: int = 0
    renormalize_aggregates: bool = False
    ablations: AblationFlags = field(default_factory=AblationFlags)

    def __post_init__(self) -> None:
        if not self.lr > 0.0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {value}")
        if not self.eps > 0.0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        for name in ("batch_size", "epochs", "k", "n"):
            value = getattr(self, name)
            if not (isinstance(value, int) and value >= 1):
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if not self.tau > 0.0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not self.lambda_ood >= 0.0:
            raise ConfigError(f"lambda_ood must be non-negative, got {self.lambda_ood}")
        if not (isinstance(self.seed, int) and 0 <= self.seed < MAX_SEED):
            raise ConfigError(f"seed must be an integer in [0, 2^63), got {self.seed!r}")
        if self.k > 4 * self.n * self.n:
            raise ConfigError(
                f"k={self.k} exceeds the {4 * self.n * self.n} high patches of n={self.n}"
            )

    def alignment(self) -> AlignmentConfig:
        return AlignmentConfig(
            tau=self.tau, renormalize_aggregates=self.renormalize_aggregates
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        kwargs = dict(data)
        if "ablations" in kwargs:
            raw = kwargs["ablations"]
            if not isinstance(raw, dict):
                raise ConfigError(f"ablations must be an object, got {raw!r}")
            kwargs["ablations"] = AblationFlags.from_dict(raw)
        return cls(**kwargs)


def config_hash(cfg: TrainConfig) -> str:
    """Stable 12-hex-digit digest of a config's canonical JSON form."""
    canonical = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]
