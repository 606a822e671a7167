"""Concrete executor producing dynamic traces, plus the trace text format."""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Optional

from .isa import (ALU_RI, ALU_RR, COMPARE, SP, DecodeFailure, Instruction, Op,
                  ProgramImage, decode_bytes, default_mem_size, reg_name)

REG_NAMES = tuple(reg_name(i) for i in range(9))


def alu(name: str, a: int, b: int, width: int) -> int:
    """Word-level semantics shared by the tracer and the term evaluator."""
    mask = (1 << width) - 1
    if name == "add":
        return (a + b) & mask
    if name == "sub":
        return (a - b) & mask
    if name == "mul":
        return (a * b) & mask
    if name == "udiv":
        return mask if b == 0 else a // b
    if name == "urem":
        return a if b == 0 else a % b
    if name == "and":
        return a & b
    if name == "or":
        return a | b
    if name == "xor":
        return a ^ b
    if name == "shl":
        return (a << b) & mask if b < width else 0
    if name == "lshr":
        return a >> b if b < width else 0
    raise ValueError(name)


def to_signed(v: int, width: int) -> int:
    return v - (1 << width) if v >> (width - 1) else v


def compare(name: str, a: int, b: int, width: int) -> int:
    if name == "eq":
        return int(a == b)
    if name == "ne":
        return int(a != b)
    if name == "ult":
        return int(a < b)
    if name == "uge":
        return int(a >= b)
    if name == "slt":
        return int(to_signed(a, width) < to_signed(b, width))
    if name == "sge":
        return int(to_signed(a, width) >= to_signed(b, width))
    raise ValueError(name)


@dataclass(frozen=True)
class TraceStep:
    index: int
    addr: int
    layer: int
    raw: bytes
    instr: Instruction
    effective_addrs: tuple = ()
    branch_taken: Optional[bool] = None
    written_value: Optional[int] = None
    jump_target: Optional[int] = None
    # (location, new value) pairs; registers by name, memory by byte address
    writes: tuple = ()

    @property
    def next_addr(self) -> int:
        return self.addr + len(self.raw)


@dataclass(frozen=True)
class Trace:
    steps: tuple
    program: ProgramImage
    initial_regs: tuple
    input_bytes: Mapping[int, int] = field(default_factory=dict)
    mem_size: int = 0
    fault: Optional[str] = None
    halted: bool = False

    def __len__(self) -> int:
        return len(self.steps)

    def __getitem__(self, i):
        return self.steps[i]

    @property
    def width(self) -> int:
        return self.program.width

    @property
    def input_addrs(self) -> frozenset:
        return frozenset(self.input_bytes)

    def initial_byte(self, addr: int) -> int:
        """Memory content at ``addr`` before the first step."""
        if addr in self.input_bytes:
            return self.input_bytes[addr]
        if self.program.contains(addr):
            return self.program.data[addr - self.program.base]
        return 0

    def _write_index(self):
        idx = self.__dict__.get("_widx")
        if idx is None:
            idx = {}
            for st in self.steps:
                for loc, val in st.writes:
                    idx.setdefault(loc, ([], []))
                    idx[loc][0].append(st.index)
                    idx[loc][1].append(val)
            object.__setattr__(self, "_widx", idx)
        return idx

    def value_before(self, loc, j: int) -> int:
        """Concrete value of a register name or memory byte before step ``j``."""
        entry = self._write_index().get(loc)
        if entry:
            pos = bisect.bisect_left(entry[0], j)
            if pos:
                return entry[1][pos - 1]
        if isinstance(loc, str):
            return self.initial_regs[REG_NAMES.index(loc)]
        return self.initial_byte(loc)

    def last_write_before(self, loc, j: int) -> int | None:
        """Index of the last step before ``j`` that wrote ``loc``."""
        entry = self._write_index().get(loc)
        if entry:
            pos = bisect.bisect_left(entry[0], j)
            if pos:
                return entry[0][pos - 1]
        return None

    def word_before(self, addr: int, j: int) -> int:
        wb = self.width // 8
        return sum(self.value_before(addr + i, j) << (8 * i) for i in range(wb))

    def final_regs(self) -> tuple:
        n = len(self.steps)
        return tuple(self.value_before(r, n) for r in REG_NAMES)

    def final_word(self, addr: int) -> int:
        return self.word_before(addr, len(self.steps))

    def occurrences(self, addr: int) -> list:
        return [st.index for st in self.steps if st.addr == addr]


class Coverage(NamedTuple):
    taken_seen: bool
    fallthrough_seen: bool


def branch_coverage(trace: Trace) -> dict:
    seen: dict[int, list] = {}
    for st in trace.steps:
        if st.branch_taken is None:
            continue
        flags = seen.setdefault(st.addr, [False, False])
        flags[0 if st.branch_taken else 1] = True
    return {a: Coverage(*f) for a, f in seen.items()}


class _Fault(Exception):
    pass


def _apply_inputs(image: ProgramImage, inputs, regs: list, mem: bytearray) -> dict:
    wb = image.width // 8
    mask = (1 << image.width) - 1
    input_bytes = {}
    for name, value in (inputs or {}).items():
        if name in REG_NAMES:
            regs[REG_NAMES.index(name)] = value & mask
            continue
        if name in image.symbols:
            addr = image.symbols[name]
        else:
            try:
                addr = int(name, 0)
            except ValueError:
                raise ValueError(f"unknown input location {name!r}") from None
        if isinstance(value, (bytes, bytearray)):
            data = bytes(value)
        elif isinstance(value, int):
            data = (value & mask).to_bytes(wb, "little")
        else:
            data = b"".join((v & mask).to_bytes(wb, "little") for v in value)
        if addr + len(data) > len(mem):
            raise ValueError(f"input {name!r} outside memory")
        for i, b in enumerate(data):
            mem[addr + i] = b
            input_bytes[addr + i] = b
    return input_bytes


def run(image: ProgramImage, inputs: Mapping | None = None, max_steps: int = 100_000,
        mem_size: int | None = None) -> Trace:
    """Execute ``image`` from its entry point and record every step."""
    if max_steps <= 0:
        raise ValueError("max_steps must be positive")
    W = image.width
    mask = (1 << W) - 1
    wb = W // 8
    if mem_size is None:
        mem_size = default_mem_size(W)
    if image.end > mem_size:
        raise ValueError("image larger than memory")
    mem = bytearray(mem_size)
    mem[image.base:image.end] = image.data
    regs = [0] * 9
    regs[SP] = mem_size & mask
    input_bytes = _apply_inputs(image, inputs, regs, mem)
    initial_regs = tuple(regs)
    code_lo, code_hi = image.code_region
    image_end = image.end

    cache: dict[int, Instruction] = {}
    steps = []
    pc = image.entry
    layer = 0
    fault = None
    halted = False

    def load(addr):
        if addr + wb > mem_size:
            raise _Fault(f"load out of range at {addr:#x}")
        return int.from_bytes(mem[addr:addr + wb], "little")

    for index in range(max_steps):
        ins = cache.get(pc)
        if ins is None:
            ins = decode_bytes(mem, pc, pc, W) if pc < mem_size else DecodeFailure(pc, "pc out of memory")
            if isinstance(ins, DecodeFailure):
                fault = f"decode failure at {pc:#x}: {ins.reason}"
                break
            cache[pc] = ins
        op = ins.op
        o = ins.operands
        nxt = (pc + ins.length) & mask
        eas = ()
        taken = None
        wval = None
        target = None
        writes = []
        mem_writes = []
        try:
            if op in ALU_RR:
                v = alu(ALU_RR[op], regs[o[0]], regs[o[1]], W)
                writes.append((o[0], v))
            elif op in ALU_RI:
                v = alu(ALU_RI[op], regs[o[0]], o[1], W)
                writes.append((o[0], v))
            elif op in COMPARE:
                writes.append((o[0], compare(COMPARE[op], regs[o[1]], regs[o[2]], W)))
            elif op is Op.MOVI:
                writes.append((o[0], o[1]))
            elif op is Op.MOV:
                writes.append((o[0], regs[o[1]]))
            elif op is Op.LOAD:
                ea = (regs[o[1]] + o[2]) & mask
                eas = (ea,)
                writes.append((o[0], load(ea)))
            elif op is Op.STORE:
                ea = (regs[o[0]] + o[1]) & mask
                eas = (ea,)
                mem_writes.append((ea, regs[o[2]]))
            elif op is Op.PUSH or op is Op.PUSHI:
                v = regs[o[0]] if op is Op.PUSH else o[0]
                sp = (regs[SP] - wb) & mask
                eas = (sp,)
                writes.append((SP, sp))
                mem_writes.append((sp, v))
            elif op is Op.POP:
                sp = regs[SP]
                eas = (sp,)
                v = load(sp)
                writes.append((SP, (sp + wb) & mask))
                writes.append((o[0], v))  # POP sp keeps the loaded value
            elif op is Op.JMP:
                nxt = o[0]
            elif op is Op.JMPR:
                nxt = target = regs[o[0]]
            elif op is Op.JZ or op is Op.JNZ:
                taken = (regs[o[0]] == 0) == (op is Op.JZ)
                if taken:
                    nxt = o[1]
            elif op is Op.CALL or op is Op.CALLR:
                dest = o[0] if op is Op.CALL else regs[o[0]]
                if op is Op.CALLR:
                    target = dest
                sp = (regs[SP] - wb) & mask
                eas = (sp,)
                writes.append((SP, sp))
                mem_writes.append((sp, nxt))
                nxt = dest
            elif op is Op.RET:
                sp = regs[SP]
                eas = (sp,)
                nxt = target = load(sp)
                writes.append((SP, (sp + wb) & mask))
            elif op is Op.HALT:
                pass
            for ea, _ in mem_writes:
                if ea + wb > mem_size:
                    raise _Fault(f"store out of range at {ea:#x}")
        except _Fault as exc:
            fault = str(exc)
            break

        raw = bytes(mem[pc:pc + ins.length])
        rec_writes = []
        for r, v in writes:
            regs[r] = v
            rec_writes.append((REG_NAMES[r], v))
        bumped = False
        for ea, v in mem_writes:
            data = v.to_bytes(wb, "little")
            mem[ea:ea + wb] = data
            rec_writes.extend((ea + i, b) for i, b in enumerate(data))
            if ea < image_end + wb:
                cache.clear()
            if ea < code_hi and ea + wb > code_lo:
                bumped = True
                wval = v
        steps.append(TraceStep(index, pc, layer, raw, ins, eas, taken, wval, target,
                               tuple(rec_writes)))
        if bumped:
            layer += 1
        if op is Op.HALT:
            halted = True
            break
        pc = nxt

    return Trace(tuple(steps), image, initial_regs, input_bytes, mem_size, fault, halted)


# -- text format -------------------------------------------------------------

def _hexw(v: int, width: int) -> str:
    return format(v, f"0{width // 4}x")


def format_trace(trace: Trace) -> str:
    W = trace.width
    out = [f"#trace width={W} base={_hexw(trace.program.base, W)} "
           f"entry={_hexw(trace.program.entry, W)} steps={len(trace.steps)}"]
    for name, v in zip(REG_NAMES, trace.initial_regs):
        out.append(f"#reg {name} {_hexw(v, W)}")
    for addr in sorted(trace.input_bytes):
        out.append(f"#mem {_hexw(addr, W)} {trace.input_bytes[addr]:02x}")
    if trace.fault:
        out.append(f"#fault {trace.fault}")
    for st in trace.steps:
        parts = [str(st.index), str(st.layer), _hexw(st.addr, W), st.raw.hex(), st.instr.mnemonic]
        if st.effective_addrs:
            parts.append("ea=" + ",".join(_hexw(a, W) for a in st.effective_addrs))
        if st.jump_target is not None:
            parts.append("tgt=" + _hexw(st.jump_target, W))
        if st.branch_taken is not None:
            parts.append(f"br={int(st.branch_taken)}")
        if st.written_value is not None:
            parts.append("wv=" + _hexw(st.written_value, W))
        out.append(" ".join(parts))
    return "\n".join(out) + "\n"


def write_trace(trace: Trace, path) -> None:
    with open(path, "w") as fh:
        fh.write(format_trace(trace))


def parse_trace(text: str, image: ProgramImage) -> Trace:
    """Rebuild a trace from its text form by replaying it against ``image``.

    The replay must reproduce every recorded step; a mismatch raises ValueError.
    """
    regs = {}
    mem = {}
    recorded = []
    mem_size = None
    for line in text.splitlines():
        if not line.strip():
            continue
        if line.startswith("#reg "):
            _, name, v = line.split()
            regs[name] = int(v, 16)
        elif line.startswith("#mem "):
            _, a, b = line.split()
            mem[int(a, 16)] = int(b, 16)
        elif line.startswith("#"):
            continue
        else:
            f = line.split()
            recorded.append((int(f[0]), int(f[1]), int(f[2], 16), bytes.fromhex(f[3]), f[4], f[5:]))
    inputs = {}
    for name, v in regs.items():
        inputs[name] = v
    for a, b in mem.items():
        inputs[hex(a)] = bytes([b])
    trace = run(image, inputs, max_steps=max(len(recorded), 1), mem_size=mem_size)
    if len(trace.steps) < len(recorded):
        raise ValueError("replay ended before the recorded trace")
    for st, (idx, layer, addr, raw, mnem, extra) in zip(trace.steps, recorded):
        if (st.index, st.layer, st.addr, st.raw, st.instr.mnemonic) != (idx, layer, addr, raw, mnem):
            raise ValueError(f"replay diverges at step {idx}")
    steps = trace.steps[:len(recorded)]
    halted = trace.halted and len(steps) == len(trace.steps)
    return Trace(steps, image, trace.initial_regs, trace.input_bytes, trace.mem_size,
                 trace.fault if len(steps) == len(trace.steps) else None, halted)


def read_trace(path, image: ProgramImage) -> Trace:
    with open(path) as fh:
        return parse_trace(fh.read(), image)
