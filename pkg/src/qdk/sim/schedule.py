"""Deterministic list scheduling of a program onto the accelerator engines.

Each engine runs its FIFO strictly in program order.  LOAD and STORE have
separate FIFOs but share the single DDR channel.  At every step the FIFO
head with the earliest feasible start is issued (ties go to the lower id).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction

from ..errors import ScheduleError
from .hw import SFU_CYCLES, HwConfig
from .program import DMA_ENGINES, ENGINES, Instruction, Program

TRACE_COLUMNS = ("id", "engine", "start", "end", "bytes", "macs", "layer", "category")


@dataclass(frozen=True)
class Slot:
    start: int
    end: int
    engine: str


@dataclass
class ScheduleTrace:
    slots: dict[int, Slot]
    makespan_cycles: int
    busy_cycles: dict[str, int]
    ddr_bytes_moved: Fraction
    energy_pj: float
    program: Program = field(repr=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for ins in sorted(self.program.instructions, key=lambda i: i.id):
            s = self.slots[ins.id]
            w.writerow([ins.id, ins.engine, s.start, s.end, _fmt_bytes(ins.nbytes), ins.macs,
                        ins.layer, ins.category])
        return buf.getvalue()


def _fmt_bytes(b: Fraction) -> str:
    return str(b.numerator) if b.denominator == 1 else f"{float(b):.1f}"


def duration(ins: Instruction, cfg: HwConfig) -> int:
    """Cycles an instruction occupies its engine."""
    if ins.engine in DMA_ENGINES:
        return math.ceil(ins.nbytes / cfg.bytes_per_cycle())
    if ins.engine == "MMU":
        return -(-ins.macs // cfg.mmu_throughput(ins.precision))
    if ins.engine == "VCU":
        return -(-(ins.vector_ops + SFU_CYCLES * ins.sfu_ops) // cfg.vcu_throughput())
    return 0


def simulate(program: Program, cfg: HwConfig | None = None) -> ScheduleTrace:
    cfg = cfg or HwConfig()
    fifos: dict[str, list[Instruction]] = {e: [] for e in ENGINES}
    for ins in program.instructions:
        fifos[ins.engine].append(ins)
    head = {e: 0 for e in ENGINES}
    engine_free = {e: 0 for e in ENGINES}
    ddr_free = 0
    end: dict[int, int] = {}
    slots: dict[int, Slot] = {}
    busy = {e: 0 for e in ENGINES}
    remaining = len(program.instructions)

    while remaining:
        best = None
        for e in ENGINES:
            q = fifos[e]
            if head[e] >= len(q):
                continue
            ins = q[head[e]]
            if any(d not in end for d in ins.depends_on):
                continue
            start = max([engine_free[e], *(end[d] for d in ins.depends_on)])
            if e in DMA_ENGINES:
                start = max(start, ddr_free)
            key = (start, ins.id)
            if best is None or key < best[0]:
                best = (key, e, ins)
        if best is None:
            blocked = {fifos[e][head[e]].id: sorted(d for d in fifos[e][head[e]].depends_on if d not in end)
                       for e in ENGINES if head[e] < len(fifos[e])}
            raise ScheduleError(f"deadlock: FIFO heads wait on unfinished instructions {blocked}")
        (start, _), e, ins = best
        d = duration(ins, cfg)
        stop = start + d
        end[ins.id] = stop
        slots[ins.id] = Slot(start, stop, e)
        engine_free[e] = stop
        if e in DMA_ENGINES:
            ddr_free = stop
        busy[e] += d
        head[e] += 1
        remaining -= 1

    makespan = max((s.end for s in slots.values()), default=0)
    ddr = sum((i.nbytes for i in program.instructions if i.engine in DMA_ENGINES), Fraction(0))
    energy = sum(i.macs * cfg.energy_per_mac_pj[i.precision] for i in program.instructions)
    energy += float(ddr) * cfg.energy_per_ddr_byte_pj
    return ScheduleTrace(slots, makespan, busy, ddr, float(energy), program)
