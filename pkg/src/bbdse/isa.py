"""Toy instruction set: opcodes, byte encoding and the program image.

Instructions are one opcode byte followed by operands.  A register operand
is one byte (0..7 for r0..r7, 8 for sp); immediates and code addresses are
``width // 8`` bytes, little-endian.  Opcodes 0xF0..0xFF are reserved and
never decode, as is any byte not assigned below.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from typing import Mapping, Union

SP = 8
NUM_REGS = 9
WIDTHS = (8, 16, 32)
MAGIC = b"BBDL"
# magic, width, base, entry offset from base, length
_HEADER = struct.Struct("<4sHIHI")


class Op(enum.Enum):
    """Mnemonics with their opcode byte and operand layout.

    Layout letters: ``r`` register, ``i`` immediate, ``a`` code address.
    """

    HALT = (0x00, "")
    MOVI = (0x01, "ri")
    MOV = (0x02, "rr")
    ADD = (0x03, "rr")
    SUB = (0x04, "rr")
    MUL = (0x05, "rr")
    UDIV = (0x06, "rr")
    AND = (0x07, "rr")
    OR = (0x08, "rr")
    XOR = (0x09, "rr")
    SHL = (0x0A, "rr")
    SHR = (0x0B, "rr")
    ADDI = (0x0C, "ri")
    SUBI = (0x0D, "ri")
    MULI = (0x0E, "ri")
    ANDI = (0x0F, "ri")
    ORI = (0x10, "ri")
    XORI = (0x11, "ri")
    SHLI = (0x12, "ri")
    SHRI = (0x13, "ri")
    EQ = (0x14, "rrr")
    NE = (0x15, "rrr")
    ULT = (0x16, "rrr")
    UGE = (0x17, "rrr")
    SLT = (0x18, "rrr")
    SGE = (0x19, "rrr")
    LOAD = (0x1A, "rri")
    STORE = (0x1B, "rir")
    PUSH = (0x1C, "r")
    PUSHI = (0x1D, "i")
    POP = (0x1E, "r")
    JMP = (0x1F, "a")
    JMPR = (0x20, "r")
    JZ = (0x21, "ra")
    JNZ = (0x22, "ra")
    CALL = (0x23, "a")
    CALLR = (0x24, "r")
    RET = (0x25, "")

    def __init__(self, code: int, layout: str):
        self.code = code
        self.layout = layout


OPCODES = {op.code: op for op in Op}

# binary ALU ops, shared by the register and immediate forms
ALU_RR = {Op.ADD: "add", Op.SUB: "sub", Op.MUL: "mul", Op.UDIV: "udiv",
          Op.AND: "and", Op.OR: "or", Op.XOR: "xor", Op.SHL: "shl", Op.SHR: "lshr"}
ALU_RI = {Op.ADDI: "add", Op.SUBI: "sub", Op.MULI: "mul", Op.ANDI: "and",
          Op.ORI: "or", Op.XORI: "xor", Op.SHLI: "shl", Op.SHRI: "lshr"}
COMPARE = {Op.EQ: "eq", Op.NE: "ne", Op.ULT: "ult", Op.UGE: "uge",
           Op.SLT: "slt", Op.SGE: "sge"}
COND_JUMPS = frozenset({Op.JZ, Op.JNZ})
INDIRECT = frozenset({Op.JMPR, Op.CALLR, Op.RET})
TERMINATORS = frozenset({Op.HALT, Op.JMP, Op.JMPR, Op.RET})


def reg_name(index: int) -> str:
    return "sp" if index == SP else f"r{index}"


def parse_reg(text: str) -> int:
    text = text.strip().lower()
    if text == "sp":
        return SP
    if len(text) == 2 and text[0] == "r" and text[1] in "01234567":
        return int(text[1])
    raise ValueError(f"not a register: {text!r}")


def check_width(width: int) -> int:
    if width not in WIDTHS:
        raise ValueError(f"word width must be one of {WIDTHS}, got {width}")
    return width


def default_base(width: int) -> int:
    return 0x00 if width == 8 else 0x1000


def default_mem_size(width: int) -> int:
    """Size of the flat address space the tracer allocates."""
    return {8: 1 << 8, 16: 1 << 16, 32: 1 << 17}[width]


@dataclass(frozen=True)
class Instruction:
    op: Op
    operands: tuple[int, ...]
    width: int = 32

    @property
    def length(self) -> int:
        wb = self.width // 8
        return 1 + sum(1 if k == "r" else wb for k in self.op.layout)

    @property
    def mnemonic(self) -> str:
        return self.op.name

    def target(self) -> int | None:
        """Direct control-transfer target, if any."""
        if "a" in self.op.layout:
            return self.operands[self.op.layout.index("a")]
        return None

    def encode(self) -> bytes:
        wb = self.width // 8
        out = bytearray([self.op.code])
        for kind, value in zip(self.op.layout, self.operands):
            if kind == "r":
                out.append(value)
            else:
                out += (value % (1 << self.width)).to_bytes(wb, "little")
        return bytes(out)

    def __str__(self) -> str:
        ops = self.operands
        if self.op is Op.LOAD:
            return f"LOAD {reg_name(ops[0])}, [{reg_name(ops[1])}+{ops[2]:#x}]"
        if self.op is Op.STORE:
            return f"STORE [{reg_name(ops[0])}+{ops[1]:#x}], {reg_name(ops[2])}"
        parts = []
        for kind, value in zip(self.op.layout, ops):
            parts.append(reg_name(value) if kind == "r" else f"{value:#x}")
        return self.op.name + (" " + ", ".join(parts) if parts else "")


@dataclass(frozen=True)
class DecodeFailure:
    addr: int
    reason: str

    def __bool__(self) -> bool:
        return False


def decode_bytes(buf, offset: int, addr: int, width: int) -> Union[Instruction, DecodeFailure]:
    """Decode the instruction at ``buf[offset]``; ``addr`` is only used for reporting."""
    if offset < 0 or offset >= len(buf):
        return DecodeFailure(addr, "out of image")
    op = OPCODES.get(buf[offset])
    if op is None:
        return DecodeFailure(addr, f"reserved opcode {buf[offset]:#04x}")
    wb = width // 8
    pos = offset + 1
    operands = []
    for kind in op.layout:
        if kind == "r":
            if pos >= len(buf):
                return DecodeFailure(addr, "truncated operand")
            if buf[pos] >= NUM_REGS:
                return DecodeFailure(addr, f"bad register byte {buf[pos]:#04x}")
            operands.append(buf[pos])
            pos += 1
        else:
            if pos + wb > len(buf):
                return DecodeFailure(addr, "truncated operand")
            operands.append(int.from_bytes(bytes(buf[pos:pos + wb]), "little"))
            pos += wb
    return Instruction(op, tuple(operands), width)


@dataclass(frozen=True)
class ProgramImage:
    """Code and data bytes loaded at ``base`` plus the assembler's symbol table."""

    width: int
    base: int
    data: bytes
    entry: int
    code_region: tuple[int, int]
    symbols: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        check_width(self.width)
        lo, hi = self.code_region
        if not (lo <= self.entry < hi) and self.data:
            raise ValueError(f"entry {self.entry:#x} outside code region [{lo:#x}, {hi:#x})")
        if self.end > (1 << self.width):
            raise ValueError("image does not fit in the address space")

    @property
    def end(self) -> int:
        return self.base + len(self.data)

    @property
    def globals(self) -> Mapping[str, int]:
        return self.symbols

    def contains(self, addr: int) -> bool:
        return self.base <= addr < self.end

    def in_code(self, addr: int) -> bool:
        return self.code_region[0] <= addr < self.code_region[1]

    def read(self, addr: int, n: int) -> bytes:
        off = addr - self.base
        return self.data[off:off + n]

    def word(self, addr: int) -> int:
        return int.from_bytes(self.read(addr, self.width // 8), "little")

    def symbol_at(self, addr: int) -> str | None:
        for name, value in self.symbols.items():
            if value == addr:
                return name
        return None

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(MAGIC, self.width, self.base, self.entry - self.base, len(self.data))
        trailer = json.dumps({"code_region": list(self.code_region),
                              "symbols": dict(sorted(self.symbols.items()))},
                             sort_keys=True).encode()
        return header + self.data + trailer

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ProgramImage":
        if len(blob) < _HEADER.size:
            raise ValueError("truncated image header")
        magic, width, base, entry_off, length = _HEADER.unpack_from(blob)
        if magic != MAGIC:
            raise ValueError("bad image magic")
        data = blob[_HEADER.size:_HEADER.size + length]
        if len(data) != length:
            raise ValueError("truncated image body")
        meta = {"code_region": [base, base + length], "symbols": {}}
        rest = blob[_HEADER.size + length:]
        if rest:
            meta.update(json.loads(rest.decode()))
        return cls(width, base, bytes(data), base + entry_off,
                   tuple(meta["code_region"]), dict(meta["symbols"]))

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ProgramImage":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def decode(image: ProgramImage, addr: int) -> Union[Instruction, DecodeFailure]:
    return decode_bytes(image.data, addr - image.base, addr, image.width)
