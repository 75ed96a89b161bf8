from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Any, Dict

from ..vocab import LD_SIZE


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Architecture and objective hyperparameters.

    Defaults are the desk-scale toy model; :meth:`full_scale` gives the
    full-size recipe dimensions.
    """

    d_model: int = 64
    heads: int = 4
    enc_layers: int = 4
    dec_layers: int = 2
    ld_layers: int = 2
    ffn_dim: int = 256
    conv_kernel: int = 7
    subsample_factor: int = 4
    feature_dim: int = 16
    vocab_size: int = 44
    ld_vocab_size: int = LD_SIZE
    alpha: float = 0.3
    beta: float = 0.0
    use_ld: bool = False
    ld_full_context: bool = True
    use_lpb: bool = False
    use_grl: bool = False
    grl_lambda: float = 1.0
    lpb_stop_gradient: bool = False
    dropout: float = 0.1
    label_smoothing: float = 0.1

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.use_grl and self.use_lpb:
            raise ConfigError("use_grl and use_lpb are mutually exclusive")
        if (self.use_lpb or self.use_grl) and not self.use_ld:
            raise ConfigError("use_lpb / use_grl require the LD decoder (use_ld)")
        if self.lpb_stop_gradient and not self.use_lpb:
            raise ConfigError("lpb_stop_gradient only applies with use_lpb")
        if self.subsample_factor < 1 or self.subsample_factor & (self.subsample_factor - 1):
            raise ConfigError("subsample_factor must be a power of two")
        if self.conv_kernel % 2 == 0:
            raise ConfigError("conv_kernel must be odd")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must be in [0, 1)")
        if self.ld_vocab_size != LD_SIZE:
            raise ConfigError(f"ld_vocab_size must be {LD_SIZE}")
        if min(self.enc_layers, self.dec_layers) < 1 or (self.use_ld and self.ld_layers < 1):
            raise ConfigError("layer counts must be >= 1")

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        base = dict(
            d_model=256,
            heads=4,
            enc_layers=12,
            dec_layers=6,
            ld_layers=6,
            ffn_dim=2048,
            conv_kernel=15,
            feature_dim=83,
            vocab_size=5628,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)
