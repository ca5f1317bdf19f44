"""Latency, throughput and efficiency reports from schedule traces."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Iterable, Union

from .hw import PRECISIONS, HwConfig
from .program import CATEGORIES, Workload, lower_network, network_workload, vit_workload
from .schedule import ScheduleTrace, simulate

WorkloadSource = Union[Workload, Callable[[int], Workload], object, None]


@dataclass(frozen=True)
class LatencyReport:
    makespan_cycles: int
    total_ms: float
    fps: float
    breakdown: dict[str, float]          # busy-cycle fraction per category, sums to 1
    gmacs: float
    energy_pj: float
    power_efficiency_gmac_per_w: float   # (GMAC/s) / W, i.e. GMAC per joule

    def row(self) -> dict:
        out = {
            "makespan_cycles": self.makespan_cycles,
            "total_ms": self.total_ms,
            "fps": self.fps,
            "gmacs": self.gmacs,
            "energy_pj": self.energy_pj,
            "power_efficiency_gmac_per_w": self.power_efficiency_gmac_per_w,
        }
        out.update({f"frac_{c}": self.breakdown[c] for c in CATEGORIES})
        return out


def profile(trace: ScheduleTrace, network=None, cfg: HwConfig | None = None) -> LatencyReport:
    """Summarize a trace.  ``network`` is accepted for labelling symmetry
    with :func:`compare_configs`; every figure comes from the trace."""
    cfg = cfg or HwConfig()
    busy: dict[str, int] = dict.fromkeys(CATEGORIES, 0)
    macs = 0
    for ins in trace.program.instructions:
        s = trace.slots[ins.id]
        if ins.category in busy:
            busy[ins.category] += s.end - s.start
        macs += ins.macs
    total = sum(busy.values())
    breakdown = {c: (busy[c] / total if total else 0.0) for c in CATEGORIES}
    seconds = trace.makespan_cycles / cfg.frequency_hz
    fps = 1.0 / seconds if seconds else float("inf")
    energy_j = trace.energy_pj * 1e-12
    gmacs = macs / 1e9
    eff = gmacs / energy_j if energy_j else 0.0
    return LatencyReport(trace.makespan_cycles, 1e3 * seconds, fps, breakdown, gmacs,
                         trace.energy_pj, eff)


def layer_busy(trace: ScheduleTrace) -> dict[str, dict[str, int]]:
    """Busy cycles per (layer, engine)."""
    out: dict[str, dict[str, int]] = defaultdict(lambda: defaultdict(int))
    for ins in trace.program.instructions:
        s = trace.slots[ins.id]
        out[ins.layer][ins.engine] += s.end - s.start
    return {k: dict(v) for k, v in out.items()}


def compute_bound(trace: ScheduleTrace, margin: float = 1.2) -> bool:
    """True when every layer with vector work keeps its MMU busy at least
    ``margin`` times longer than its VCU."""
    for engines in layer_busy(trace).values():
        vcu = engines.get("VCU", 0)
        if vcu and engines.get("MMU", 0) < margin * vcu:
            return False
    return True


@dataclass(frozen=True)
class ComparisonRow:
    precision: str
    resolution: int
    fusion: bool
    report: LatencyReport
    speedup: float            # fp32 makespan / this makespan, same resolution


def _workload_for(network: WorkloadSource, resolution: int) -> Workload:
    if network is None:
        return vit_workload(resolution)
    if isinstance(network, Workload):
        return network
    if callable(network) and not hasattr(network, "quantizable"):
        return network(resolution)
    return network_workload(network, resolution)


def compare_configs(network: WorkloadSource, cfg: HwConfig | None = None,
                    precisions: Iterable[str] = PRECISIONS,
                    resolutions: Iterable[int] = (256, 512, 1024),
                    fusion: bool = True) -> list[ComparisonRow]:
    """One report per (precision, resolution) with speedups over fp32.

    ``network`` is a Workload, a ``resolution -> Workload`` factory, a
    ToyNetwork, or None for the default toy ViT.
    """
    cfg = cfg or HwConfig()
    rows = []
    for res in resolutions:
        wl = _workload_for(network, res)
        traces: dict[str, ScheduleTrace] = {}

        def run(p: str) -> ScheduleTrace:
            if p not in traces:
                traces[p] = simulate(lower_network(wl, p, fusion, cfg), cfg)
            return traces[p]

        base = run("fp32").makespan_cycles
        for p in precisions:
            tr = run(p)
            rows.append(ComparisonRow(p, res, fusion, profile(tr, wl, cfg), base / tr.makespan_cycles))
    return rows
