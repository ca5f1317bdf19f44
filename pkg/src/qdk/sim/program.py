"""Instructions, programs, workloads and the lowering of a workload to a tiled program.

A workload is a flat list of :class:`Op` records (shapes and counts only).
Lowering turns each op into LOAD / MMU / VCU / STORE instructions per tile,
with a SYNC barrier in front of every op that consumes an earlier result.
"""

from __future__ import annotations

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Literal

from ..errors import CapacityError, ConfigError, ScheduleError
from .hw import ACCUM_BITS, PRECISION_BITS, PRECISIONS, HwConfig

ENGINES = ("LOAD", "STORE", "MMU", "VCU", "SYNC")
DMA_ENGINES = ("LOAD", "STORE")
CATEGORIES = ("matmul", "conv", "softmax", "layernorm", "vector", "data-movement")

# per-element VCU cost: (plain vector ops, SFU ops)
VECTOR_COST = {
    "gelu": (6, 1),
    "relu": (1, 0),
    "sinh": (4, 1),
    "softplus": (3, 2),
    "residual": (1, 0),
    "requant": (3, 0),
    "softmax": (4, 1),
    # log2 p = (s - max) * log2(e) - log2(sum): linear per element, the
    # single log2 per row is negligible
    "log2quant": (3, 0),
    "layernorm": (7, 0),
    "polish": (3, 1),
    "unpolish": (3, 1),
}
# category charged for a VCU instruction, by its leading stage
STAGE_CATEGORY = {"softmax": "softmax", "layernorm": "layernorm"}

# Row tiles per op, at least.  Matmul/conv tiles are finer so pipeline fill
# and drain (first prologue, last epilogue) stay short; attention re-streams
# K and V per query tile, so it keeps few tiles.
MIN_TILES = 32
ATTENTION_MIN_TILES = 4


@dataclass(frozen=True)
class Instruction:
    id: int
    engine: str
    bits: int = 0                 # LOAD / STORE payload
    macs: int = 0                 # MMU
    vector_ops: int = 0           # VCU
    sfu_ops: int = 0              # VCU
    precision: str = "fp32"
    depends_on: frozenset = frozenset()
    fused_successor: int | None = None
    layer: str = ""
    category: str = ""
    tensor: str = ""

    def __post_init__(self):
        if self.engine not in ENGINES:
            raise ConfigError(f"unknown engine {self.engine!r}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"unknown precision {self.precision!r}")
        if min(self.bits, self.macs, self.vector_ops, self.sfu_ops) < 0:
            raise ConfigError(f"instruction {self.id}: negative payload")
        object.__setattr__(self, "depends_on", frozenset(self.depends_on))

    @property
    def nbytes(self) -> Fraction:
        return Fraction(self.bits, 8)

    @classmethod
    def load(cls, id: int, nbytes: int, **kw) -> "Instruction":
        return cls(id, "LOAD", bits=8 * nbytes, category="data-movement", **kw)

    @classmethod
    def store(cls, id: int, nbytes: int, **kw) -> "Instruction":
        return cls(id, "STORE", bits=8 * nbytes, category="data-movement", **kw)

    @classmethod
    def mmu(cls, id: int, macs: int, **kw) -> "Instruction":
        kw.setdefault("category", "matmul")
        return cls(id, "MMU", macs=macs, **kw)

    @classmethod
    def vcu(cls, id: int, ops: int, sfu: int = 0, **kw) -> "Instruction":
        kw.setdefault("category", "vector")
        return cls(id, "VCU", vector_ops=ops, sfu_ops=sfu, **kw)


@dataclass
class Program:
    instructions: list[Instruction]
    residency: dict[str, str] = field(default_factory=dict)   # tensor -> "DDR" | "SRAM"
    traffic_bits: dict[str, int] = field(default_factory=dict)  # required DDR traffic per tensor

    def __post_init__(self):
        self.validate()

    def validate(self):
        ids = [i.id for i in self.instructions]
        if len(set(ids)) != len(ids):
            raise ScheduleError("duplicate instruction ids")
        by_id = {i.id: i for i in self.instructions}
        for ins in self.instructions:
            missing = ins.depends_on - by_id.keys()
            if missing:
                raise ScheduleError(f"instruction {ins.id} depends on unknown ids {sorted(missing)}")
            if ins.fused_successor is not None:
                succ = by_id.get(ins.fused_successor)
                if succ is None or succ.engine != "VCU":
                    raise ScheduleError(f"instruction {ins.id}: fused successor must be a VCU instruction")
        cycle = _find_cycle(self.instructions)
        if cycle:
            raise ScheduleError(f"dependency cycle through ids {cycle}")

    def by_id(self) -> dict[int, Instruction]:
        return {i.id: i for i in self.instructions}

    @property
    def ddr_bits(self) -> int:
        return sum(i.bits for i in self.instructions if i.engine in DMA_ENGINES)


def _find_cycle(instructions: list[Instruction]) -> list[int]:
    indeg = {i.id: len(i.depends_on) for i in instructions}
    users = defaultdict(list)
    for i in instructions:
        for d in i.depends_on:
            users[d].append(i.id)
    ready = [k for k, v in indeg.items() if v == 0]
    seen = 0
    while ready:
        k = ready.pop()
        seen += 1
        for u in users[k]:
            indeg[u] -= 1
            if indeg[u] == 0:
                ready.append(u)
    if seen == len(instructions):
        return []
    return sorted(k for k, v in indeg.items() if v > 0)


# ---------------------------------------------------------------- workloads

OpKind = Literal["linear", "conv", "attention", "layernorm", "vector"]


@dataclass(frozen=True)
class Op:
    """One layer, described by shapes only.

    ``rows`` output rows (tokens or pixels).  Linear / conv: ``k`` is the
    reduction length and ``n`` the output width.  Attention: ``k`` is the
    total head width and ``n`` the key count.  ``in_elems`` gives the stored
    size of each input tensor (a conv gathers its patches on chip, so this
    is smaller than rows * k).
    """

    name: str
    kind: OpKind
    rows: int
    k: int
    n: int
    inputs: tuple[str, ...]
    output: str
    in_elems: tuple[int, ...] = ()
    stages: tuple[str, ...] = ()
    heads: int = 1
    polish_input: bool = False

    def __post_init__(self):
        if min(self.rows, self.k, self.n, self.heads) < 1:
            raise ConfigError(f"op {self.name}: dimensions must be positive")
        if not self.inputs:
            raise ConfigError(f"op {self.name}: needs at least one input")
        if not self.in_elems:
            object.__setattr__(self, "in_elems", tuple(self.rows * self.k for _ in self.inputs))
        if len(self.in_elems) != len(self.inputs):
            raise ConfigError(f"op {self.name}: one in_elems entry per input required")
        for s in self.stages:
            if s not in VECTOR_COST:
                raise ConfigError(f"op {self.name}: unknown vector stage {s!r}")

    @property
    def out_width(self) -> int:
        return self.n if self.kind in ("linear", "conv") else self.k

    @property
    def macs(self) -> int:
        if self.kind in ("linear", "conv"):
            return self.rows * self.k * self.n
        if self.kind == "attention":
            return 2 * self.rows * self.n * self.k
        return 0


@dataclass(frozen=True)
class Workload:
    name: str
    ops: tuple[Op, ...]
    external: tuple[str, ...] = ("image",)

    def total_macs(self) -> int:
        return sum(o.macs for o in self.ops)


def vit_workload(resolution: int = 256, dim: int = 384, depth: int = 6, heads: int = 1,
                 mlp_ratio: int = 4, patch: int = 8, in_channels: int = 3,
                 decoder: tuple[int, ...] = (128, 64), upsample: int = 4,
                 polish_decoder: bool = True, name: str | None = None) -> Workload:
    """Toy ViT encoder plus a conv decoder ending in a 1-channel depth head.

    The decoder runs at ``upsample`` times the token grid; the nearest
    upsampling is folded into the first decoder conv's patch gather.
    """
    if resolution % patch:
        raise ConfigError(f"resolution {resolution} is not a multiple of patch {patch}")
    grid = resolution // patch
    T = grid * grid
    hidden = dim * mlp_ratio
    ops = [Op("patch_embed", "conv", T, in_channels * patch * patch, dim, ("image",), "x0")]
    x = "x0"
    for b in range(depth):
        p = f"block{b}"
        ops += [
            Op(f"{p}.ln1", "layernorm", T, dim, dim, (x,), f"{p}.h1", stages=("layernorm",)),
            Op(f"{p}.qkv", "linear", T, dim, 3 * dim, (f"{p}.h1",), f"{p}.qkv_out"),
            Op(f"{p}.attn", "attention", T, dim, T, (f"{p}.qkv_out",), f"{p}.ctx",
               in_elems=(3 * T * dim,), stages=("softmax",), heads=heads),
            Op(f"{p}.proj", "linear", T, dim, dim, (f"{p}.ctx", x), f"{p}.x1",
               in_elems=(T * dim, T * dim), stages=("residual",)),
            Op(f"{p}.ln2", "layernorm", T, dim, dim, (f"{p}.x1",), f"{p}.h2", stages=("layernorm",)),
            Op(f"{p}.fc1", "linear", T, dim, hidden, (f"{p}.h2",), f"{p}.m", stages=("gelu",)),
            Op(f"{p}.fc2", "linear", T, hidden, dim, (f"{p}.m", f"{p}.x1"), f"{p}.x2",
               in_elems=(T * hidden, T * dim), stages=("residual",)),
        ]
        x = f"{p}.x2"
    ops.append(Op("norm", "layernorm", T, dim, dim, (x,), "enc", stages=("layernorm",)))
    pix = T * upsample * upsample
    c_in, src, src_elems = dim, "enc", T * dim
    acts = ("sinh",) + ("gelu",) * (len(decoder) - 1)
    for i, (c_out, act) in enumerate(zip(decoder, acts)):
        out = f"d{i + 1}"
        ops.append(Op(f"dec{i + 1}", "conv", pix, c_in * 9, c_out, (src,), out,
                      in_elems=(src_elems,), stages=(act,), polish_input=polish_decoder))
        c_in, src, src_elems = c_out, out, pix * c_out
    ops.append(Op("head", "conv", pix, c_in, 1, (src,), "depth", in_elems=(src_elems,),
                  stages=("softplus",), polish_input=polish_decoder))
    return Workload(name or f"vit{dim}x{depth}@{resolution}", tuple(ops))


def network_workload(network, resolution: int | None = None) -> Workload:
    """Workload with the layer shapes of a :class:`~qdk.network.ToyNetwork`."""
    spec = network.spec
    res = resolution or spec.image_size
    polish = any(m.policy.polish for m in network.quantizable())
    return vit_workload(res, dim=spec.width, depth=spec.depth, heads=spec.heads,
                        mlp_ratio=spec.mlp_ratio, patch=spec.patch, in_channels=spec.in_channels,
                        decoder=(spec.width, max(spec.width // 2, 1)), upsample=1,
                        polish_decoder=polish, name=f"toy{spec.width}x{spec.depth}@{res}")


# ---------------------------------------------------------------- lowering

class _Emitter:
    def __init__(self, precision: str):
        self.precision = precision
        self.out: list[Instruction] = []
        self.traffic: dict[str, int] = defaultdict(int)

    def emit(self, engine: str, deps: Iterable[int | None] = (), **kw) -> int:
        i = len(self.out)
        d = frozenset(x for x in deps if x is not None)
        self.out.append(Instruction(i, engine, precision=self.precision, depends_on=d, **kw))
        return i

    def dma(self, engine: str, layer: str, tensor: str, bits: int, deps) -> int:
        self.traffic[tensor] += bits
        return self.emit(engine, deps, bits=bits, layer=layer, category="data-movement", tensor=tensor)

    def vcu(self, layer: str, stages, elems: int, deps, category: str | None = None) -> int:
        ops = sfu = 0
        for s in stages:
            o, f = VECTOR_COST[s]
            ops += o * elems
            sfu += f * elems
        cat = category or (STAGE_CATEGORY.get(stages[0], "vector") if stages else "vector")
        return self.emit("VCU", deps, vector_ops=ops, sfu_ops=sfu, layer=layer, category=cat)

    def fuse(self, producer: int, successor: int):
        old = self.out[producer]
        self.out[producer] = replace(old, fused_successor=successor)

    def round_trip(self, layer: str, tensor: str, bits: int, dep: int) -> int:
        """Unfused hand-off: STORE to DDR, then LOAD back."""
        st = self.dma("STORE", layer, tensor, bits, [dep])
        return self.dma("LOAD", layer, tensor, bits, [st])


def _splits(total: int, step: int) -> list[int]:
    q, r = divmod(total, step)
    return [step] * q + ([r] if r else [])


def _share(total: int, start: int, stop: int, rows: int) -> int:
    # exact partition of ``total`` over row ranges (sums to total)
    return total * stop // rows - total * start // rows


def _row_tiles(rows: int, per_row_bits: int, budget: int, name: str,
               min_tiles: int = MIN_TILES) -> list[int]:
    if budget <= 0 or per_row_bits > budget:
        raise CapacityError(f"{name}: one row needs {math.ceil(per_row_bits / 8)} bytes of SRAM, "
                            f"over the {max(budget, 0) // 8}-byte tile budget")
    step = max(1, min(budget // per_row_bits, math.ceil(rows / min_tiles)))
    return _splits(rows, step)


def lower_network(network, precision: str = "fp32", fusion: bool = True,
                  cfg: HwConfig | None = None) -> Program:
    """Lower a :class:`Workload` (or a ToyNetwork) to a tiled instruction program.

    Rows are split across cores, so the SRAM budget is the aggregate of all
    cores.  Activations that fit a quarter of it stay on chip between ops;
    larger ones round-trip through DDR.  Tiles use up to half of it.
    """
    cfg = cfg or HwConfig()
    if precision not in PRECISIONS:
        raise ConfigError(f"unknown precision {precision!r}")
    wl = network if isinstance(network, Workload) else network_workload(network)
    w_bits, a_bits = PRECISION_BITS[precision]
    quantized = precision != "fp32"
    sram_bits = 8 * int(cfg.sram_bytes_per_core) * int(cfg.num_cores)
    ctx = _Ctx(w_bits, a_bits, fusion, sram_bits // 2)

    consumers = defaultdict(list)
    for o in wl.ops:
        for t in o.inputs:
            consumers[t].append(o)
    residency = {t: "DDR" for t in wl.external}
    for o in wl.ops:
        size = o.rows * o.out_width * a_bits
        residency[o.output] = "SRAM" if size <= sram_bits // 4 and o is not wl.ops[-1] else "DDR"
    ctx.residency = residency

    em = _Emitter(precision)
    done: dict[str, list[int]] = {}
    for op in wl.ops:
        deps_in = [i for t in op.inputs for i in done.get(t, [])]
        sync = em.emit("SYNC", deps_in, layer=op.name) if deps_in else None
        stages = list(op.stages)
        if quantized:
            if op.kind == "attention":
                stages.append("log2quant")
            if any(c.polish_input for c in consumers.get(op.output, [])):
                stages.append("polish")
        lower = {"linear": _lower_matmul, "conv": _lower_matmul, "attention": _lower_attention}
        fn = lower.get(op.kind, _lower_vector)
        done[op.output] = fn(em, ctx, op, tuple(stages), quantized, sync)
    return Program(em.out, residency, dict(em.traffic))


@dataclass
class _Ctx:
    w_bits: int
    a_bits: int
    fusion: bool
    budget: int
    residency: dict = field(default_factory=dict)

    def in_ddr(self, tensor: str) -> bool:
        return self.residency.get(tensor) == "DDR"


def _load_inputs(em, ctx, op, start, stop, deps) -> list[int]:
    return [
        em.dma("LOAD", op.name, t, _share(n, start, stop, op.rows) * ctx.a_bits, deps)
        for t, n in zip(op.inputs, op.in_elems)
        if ctx.in_ddr(t)
    ]


def _epilogue(em, ctx, op, mmu: int, stages, rows_t: int, width: int, category=None) -> int:
    """VCU work behind an MMU tile: fused on chip, or via a DDR round trip."""
    if not stages:
        return mmu
    if ctx.fusion:
        v = em.vcu(op.name, stages, rows_t * width, [mmu], category)
        em.fuse(mmu, v)
        return v
    ld = em.round_trip(op.name, f"{op.name}.pre", rows_t * width * ACCUM_BITS, mmu)
    return em.vcu(op.name, stages, rows_t * width, [ld], category)


def _lower_matmul(em, ctx, op, stages, quantized, sync) -> list[int]:
    cat = "conv" if op.kind == "conv" else "matmul"
    if quantized:
        stages = stages + ("requant",)
    prologue = ("unpolish",) if quantized and op.polish_input else ()
    n_chunks = max(1, math.ceil(op.k * op.n * ctx.w_bits / (ctx.budget // 2)))
    in_row = sum(math.ceil(n / op.rows) for n in op.in_elems) * ctx.a_bits
    tails = []
    for ncol in _splits(op.n, math.ceil(op.n / n_chunks)):
        wload = em.dma("LOAD", op.name, f"{op.name}.weight", op.k * ncol * ctx.w_bits, ())
        tiles = _row_tiles(op.rows, in_row + ncol * ACCUM_BITS, ctx.budget // 2, op.name)
        bounds = [0, *itertools.accumulate(tiles)]
        # software pipelining: stage tile t+1's loads before tile t's epilogue
        pending = None
        for t in range(len(tiles) + 1):
            staged = None
            if t < len(tiles):
                a, b = bounds[t], bounds[t + 1]
                loads = _load_inputs(em, ctx, op, a, b, (sync,))
                pro = None
                if prologue:
                    pro = em.vcu(op.name, prologue, _share(op.in_elems[0], a, b, op.rows), [sync, *loads])
                staged = (b - a, [sync, wload, *loads, pro])
            if pending is not None:
                r, deps = pending
                m = em.emit("MMU", deps, macs=r * op.k * ncol, layer=op.name, category=cat)
                last = _epilogue(em, ctx, op, m, stages, r, ncol)
                if ctx.in_ddr(op.output):
                    last = em.dma("STORE", op.name, op.output, r * ncol * ctx.a_bits, [last])
                tails.append(last)
            pending = staged
    return tails


def _lower_attention(em, ctx, op, stages, quantized, sync) -> list[int]:
    """Per query tile: S = Q K^T, P = softmax(S), O = P V, all heads at once.

    Scores live on chip (streamed over key blocks); when the qkv tensor is
    not SRAM-resident, every query tile streams K and V from DDR.
    """
    T, D, src = op.n, op.k, op.inputs[0]
    key_block = min(T, 256)
    per_row = D * ctx.a_bits + D * ACCUM_BITS + op.heads * key_block * ACCUM_BITS
    tiles = _row_tiles(op.rows, per_row, ctx.budget, op.name, ATTENTION_MIN_TILES)
    post = ("requant",) if quantized else ()
    tails = []
    pending = None
    for t in range(len(tiles) + 1):
        staged = None
        if t < len(tiles):
            r = tiles[t]
            loads = []
            if ctx.in_ddr(src):
                loads.append(em.dma("LOAD", op.name, src, r * D * ctx.a_bits, (sync,)))            # Q
                loads.append(em.dma("LOAD", op.name, src, 2 * T * D * ctx.a_bits, (sync,)))       # K, V
            s = em.emit("MMU", [sync, *loads], macs=r * T * D, layer=op.name, category="matmul")
            if ctx.fusion:
                p = em.vcu(op.name, stages, r * T * op.heads, [s], "softmax")
                em.fuse(s, p)
            else:
                ld = em.round_trip(op.name, f"{op.name}.scores", r * T * op.heads * ACCUM_BITS, s)
                p = em.vcu(op.name, stages, r * T * op.heads, [ld], "softmax")
                p = em.round_trip(op.name, f"{op.name}.probs", r * T * op.heads * ctx.a_bits, p)
            staged = (r, p)
        if pending is not None:
            r, p = pending
            m = em.emit("MMU", [p], macs=r * T * D, layer=op.name, category="matmul")
            last = _epilogue(em, ctx, op, m, post, r, D)
            if ctx.in_ddr(op.output):
                last = em.dma("STORE", op.name, op.output, r * D * ctx.a_bits, [last])
            tails.append(last)
        pending = staged
    return tails


def _lower_vector(em, ctx, op, stages, quantized, sync) -> list[int]:
    if quantized:
        stages = stages + ("requant",)
    in_row = sum(math.ceil(n / op.rows) for n in op.in_elems) * ctx.a_bits
    tiles = _row_tiles(op.rows, in_row + op.out_width * ACCUM_BITS, ctx.budget, op.name)
    tails = []
    a = 0
    for r in tiles:
        loads = _load_inputs(em, ctx, op, a, a + r, (sync,))
        last = em.vcu(op.name, stages, r * op.out_width, [sync, *loads])
        if ctx.in_ddr(op.output):
            last = em.dma("STORE", op.name, op.output, r * op.out_width * ctx.a_bits, [last])
        tails.append(last)
        a += r
    return tails
