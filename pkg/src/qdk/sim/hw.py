"""Accelerator parameters.  Units: Hz, bytes/s, bytes, pJ."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import yaml

from ..errors import ConfigError

PRECISIONS = ("fp32", "w4a8", "w4a4")

# (weight bits, activation bits) moved over DDR per precision
PRECISION_BITS = {"fp32": (32, 32), "w4a8": (4, 8), "w4a4": (4, 4)}
ACCUM_BITS = 32
SFU_CYCLES = 4


def _per_precision(**kw) -> dict:
    return dict(kw)


@dataclass(frozen=True)
class HwConfig:
    frequency_hz: float = 1e9
    ddr_bandwidth_bytes_per_s: float = 19.2e9
    num_cores: int = 8
    mmu_macs_per_cycle_per_core: dict = field(
        default_factory=lambda: _per_precision(fp32=256, w4a8=1024, w4a4=2048)
    )
    vcu_lanes_per_core: int = 16
    sram_bytes_per_core: int = 4 << 20
    energy_per_mac_pj: dict = field(
        default_factory=lambda: _per_precision(fp32=3.7, w4a8=0.25, w4a4=0.15)
    )
    energy_per_ddr_byte_pj: float = 20.0

    def __post_init__(self):
        for name in ("frequency_hz", "ddr_bandwidth_bytes_per_s", "num_cores",
                     "vcu_lanes_per_core", "sram_bytes_per_core", "energy_per_ddr_byte_pj"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("mmu_macs_per_cycle_per_core", "energy_per_mac_pj"):
            table = getattr(self, name)
            missing = set(PRECISIONS) - set(table)
            if missing:
                raise ConfigError(f"{name} lacks entries for {sorted(missing)}")
            if any(not table[p] > 0 for p in PRECISIONS):
                raise ConfigError(f"{name} entries must be positive")
        macs = self.mmu_macs_per_cycle_per_core
        if not macs["w4a4"] >= macs["w4a8"] >= macs["fp32"]:
            raise ConfigError("need MACs/cycle w4a4 >= w4a8 >= fp32")
        for name in ("num_cores", "vcu_lanes_per_core", "sram_bytes_per_core"):
            if int(getattr(self, name)) != getattr(self, name):
                raise ConfigError(f"{name} must be an integer")

    # derived throughputs

    def mmu_throughput(self, precision: str) -> int:
        return int(self.mmu_macs_per_cycle_per_core[precision]) * int(self.num_cores)

    def vcu_throughput(self) -> int:
        return int(self.vcu_lanes_per_core) * int(self.num_cores)

    def bytes_per_cycle(self) -> Fraction:
        return Fraction(str(self.ddr_bandwidth_bytes_per_s)) / Fraction(str(self.frequency_hz))

    def with_cores(self, n: int) -> "HwConfig":
        return replace(self, num_cores=n)

    # serialization

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mmu_macs_per_cycle_per_core"] = dict(self.mmu_macs_per_cycle_per_core)
        d["energy_per_mac_pj"] = dict(self.energy_per_mac_pj)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HwConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown hardware keys: {sorted(unknown)}")
        merged = cls().to_dict()
        for k, v in d.items():
            if isinstance(merged.get(k), dict):
                merged[k] = {**merged[k], **(v or {})}
            else:
                merged[k] = v
        return cls(**merged)

    @classmethod
    def load(cls, path: str | Path) -> "HwConfig":
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a mapping of hardware fields")
        return cls.from_dict(data)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True), encoding="utf-8")
