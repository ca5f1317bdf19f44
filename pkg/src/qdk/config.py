"""Run configuration read from YAML.

Example (every key optional)::

    seed: 0
    bits: {weights: 4, activations: 8}     # activations 32 = weights only
    method: full                           # or minmax
    epsilon: 95
    calibration_samples: 32
    eval_samples: 64
    damp_ratio: 0.01
    reconstruction: {iterations: 2000, learning_rate: 0.01, lambda_reg: 0.01}
    network: {width: 32, depth: 2, decoder_outlier_channels: 4}
    hardware: hw.yaml                      # path (relative to this file) or a mapping
    simulate: {workload: vit, resolutions: [256, 512, 1024], fusion: true}
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .compensation import DEFAULT_DAMP_RATIO
from .errors import ConfigError
from .pipeline import QuantConfig
from .reconstruction import ReconstructionConfig
from .sim.hw import PRECISIONS, HwConfig

WORKLOADS = ("vit", "network")


@dataclass
class SimulateConfig:
    workload: str = "vit"        # "vit": toy ViT-S-like model, "network": the toy MDE's own shapes
    resolutions: tuple[int, ...] = (256, 512, 1024)
    fusion: bool = True

    def __post_init__(self):
        if self.workload not in WORKLOADS:
            raise ConfigError(f"simulate.workload must be one of {WORKLOADS}, got {self.workload!r}")
        self.resolutions = tuple(int(r) for r in self.resolutions)
        if not self.resolutions or min(self.resolutions) < 1:
            raise ConfigError("simulate.resolutions must be a non-empty list of positive sizes")


@dataclass
class RunConfig:
    seed: int = 0
    weight_bits: int = 4
    act_bits: int = 8
    method: str = "full"
    epsilon: float = 95.0
    calibration_samples: int = 32
    eval_samples: int = 64
    damp_ratio: float = DEFAULT_DAMP_RATIO
    reconstruction: ReconstructionConfig = field(default_factory=ReconstructionConfig)
    network: dict = field(default_factory=lambda: {"width": 32, "depth": 2, "decoder_outlier_channels": 4})
    hardware: HwConfig = field(default_factory=HwConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)

    def __post_init__(self):
        if self.method not in ("full", "minmax"):
            raise ConfigError(f"method must be full or minmax, got {self.method!r}")
        if self.weight_bits != 32 and self.weight_bits not in range(2, 17):
            raise ConfigError(f"bits.weights must lie in [2, 16] or be 32, got {self.weight_bits}")
        if self.act_bits != 32 and self.act_bits not in range(2, 17):
            raise ConfigError(f"bits.activations must lie in [2, 16] or be 32, got {self.act_bits}")
        if not 0 < self.epsilon <= 100:
            raise ConfigError(f"epsilon must lie in (0, 100], got {self.epsilon}")
        if self.calibration_samples < 1 or self.eval_samples < 1:
            raise ConfigError("sample counts must be positive")

    @property
    def label(self) -> str:
        """Precision label: "fp32", "w4a8", "w4a4", or e.g. "w4a32" for weights only."""
        if self.weight_bits >= 32:
            return "fp32"
        return f"w{self.weight_bits}a{self.act_bits}"

    def with_precision(self, precision: str) -> "RunConfig":
        if precision not in PRECISIONS:
            raise ConfigError(f"unknown precision {precision!r}")
        d = dict(self.__dict__)
        if precision == "fp32":
            d["weight_bits"], d["act_bits"] = 32, 32
        else:
            d["weight_bits"] = int(precision[1:precision.index("a")])
            d["act_bits"] = int(precision[precision.index("a") + 1 :])
        return RunConfig(**d)

    def quant_config(self) -> QuantConfig:
        return QuantConfig(weight_bits=self.weight_bits, act_bits=self.act_bits, epsilon=self.epsilon,
                           calibration_samples=self.calibration_samples, damp_ratio=self.damp_ratio,
                           method=self.method, reconstruction=self.reconstruction)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "bits": {"weights": self.weight_bits, "activations": self.act_bits},
            "method": self.method,
            "epsilon": self.epsilon,
            "calibration_samples": self.calibration_samples,
            "eval_samples": self.eval_samples,
            "damp_ratio": self.damp_ratio,
            "reconstruction": asdict(self.reconstruction),
            "network": dict(self.network),
            "hardware": self.hardware.to_dict(),
            "simulate": {"workload": self.simulate.workload, "resolutions": list(self.simulate.resolutions),
                         "fusion": self.simulate.fusion},
        }

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "RunConfig":
        d = dict(d or {})
        known = {"seed", "bits", "method", "epsilon", "calibration_samples", "eval_samples", "damp_ratio",
                 "reconstruction", "network", "hardware", "simulate"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for k in ("seed", "method", "epsilon", "calibration_samples", "eval_samples", "damp_ratio"):
            if k in d:
                kw[k] = d[k]
        bits = d.get("bits") or {}
        if set(bits) - {"weights", "activations"}:
            raise ConfigError(f"unknown bits keys: {sorted(set(bits) - {'weights', 'activations'})}")
        if "weights" in bits:
            kw["weight_bits"] = int(bits["weights"])
        if "activations" in bits:
            kw["act_bits"] = int(bits["activations"])
        if "reconstruction" in d:
            kw["reconstruction"] = _build(ReconstructionConfig, d["reconstruction"], "reconstruction")
        if "network" in d:
            net = dict(d["network"] or {})
            allowed = {"width", "depth", "decoder_outlier_channels", "heads", "mlp_ratio", "image_size",
                       "patch", "outlier_gain", "decoder_gain", "outlier_fanout"}
            if set(net) - allowed:
                raise ConfigError(f"unknown network keys: {sorted(set(net) - allowed)}")
            kw["network"] = {**cls().network, **net}
        if "hardware" in d:
            hw = d["hardware"]
            if isinstance(hw, str):
                p = Path(hw)
                if not p.is_absolute() and base_dir is not None:
                    p = base_dir / p
                if not p.exists():
                    raise ConfigError(f"hardware config {p} not found")
                kw["hardware"] = HwConfig.load(p)
            else:
                kw["hardware"] = HwConfig.from_dict(hw or {})
        if "simulate" in d:
            kw["simulate"] = _build(SimulateConfig, d["simulate"], "simulate")
        try:
            return cls(**kw)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8"))
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: invalid YAML ({e})") from None
        if data is not None and not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a mapping at top level")
        return cls.from_dict(data or {}, path.parent)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _build(cls, d, section: str):
    d = dict(d or {})
    names = {f.name for f in fields(cls)}
    if set(d) - names:
        raise ConfigError(f"unknown {section} keys: {sorted(set(d) - names)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{section}: {e}") from None
