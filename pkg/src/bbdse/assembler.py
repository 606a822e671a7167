"""Two-pass textual assembler for the toy ISA.

Syntax, one statement per line::

    label:  MNEMONIC op, op, ...   ; comment
            LOAD r1, [r2+8]
            STORE [sp+4], r1
            .byte 0xff, 1, 2
            .word table+4, 7
            .zero 16
            .org 0x2000     ; move the location counter (pads with zero bytes)
            .entry main
            .data           ; everything after this is outside the code region

A trailing ``;@tag,tag`` comment attaches tags to the statement.  The
obfuscator uses them to record ground truth (junk, opaque jumps).
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .isa import (Instruction, Op, ProgramImage, check_width, default_base,
                  parse_reg)


class AssemblyError(ValueError):
    def __init__(self, message: str, line_no: int | None = None):
        prefix = f"line {line_no}: " if line_no is not None else ""
        super().__init__(prefix + message)
        self.line_no = line_no


@dataclass(frozen=True)
class ListingEntry:
    addr: int
    size: int
    kind: str                 # "insn" or "data"
    text: str
    line_no: int
    tags: frozenset = frozenset()
    labels: tuple = ()


_LABEL = re.compile(r"^([A-Za-z_.$][\w.$]*)\s*:(.*)$")
_SYMBOL = re.compile(r"^[A-Za-z_.$][\w.$]*$")
_MEM = re.compile(r"^\[\s*(\w+)\s*(?:([+-])\s*(.+?))?\s*\]$")


def _split_operands(text: str) -> list[str]:
    text = text.strip()
    if not text:
        return []
    parts, depth, cur = [], 0, ""
    for ch in text:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append(cur.strip())
            cur = ""
        else:
            cur += ch
    parts.append(cur.strip())
    return parts


def _eval(expr: str, symbols: dict | None, line_no: int) -> int:
    """Evaluate ``term (+|- term)*`` where a term is an integer or a symbol.

    With ``symbols`` None (first pass) symbols evaluate to 0.
    """
    expr = expr.strip()
    if not expr:
        raise AssemblyError("empty expression", line_no)
    if len(expr) == 3 and expr[0] == expr[2] == "'":
        return ord(expr[1])
    tokens = re.findall(r"[+-]|[^\s+-]+", expr)
    total, sign, expect_term = 0, 1, True
    for tok in tokens:
        if tok in "+-":
            if expect_term:
                sign = -sign if tok == "-" else sign
                continue
            sign = 1 if tok == "+" else -1
            expect_term = True
            continue
        if not expect_term:
            raise AssemblyError(f"malformed expression {expr!r}", line_no)
        try:
            value = int(tok, 0)
        except ValueError:
            if not _SYMBOL.match(tok):
                raise AssemblyError(f"bad token {tok!r}", line_no) from None
            if symbols is None:
                value = 0
            elif tok in symbols:
                value = symbols[tok]
            else:
                raise AssemblyError(f"unresolved label {tok!r}", line_no)
        total += sign * value
        sign, expect_term = 1, False
    if expect_term:
        raise AssemblyError(f"malformed expression {expr!r}", line_no)
    return total


def _fit(value: int, width: int, line_no: int) -> int:
    if not -(1 << (width - 1)) <= value < (1 << width):
        raise AssemblyError(f"immediate {value} out of {width}-bit range", line_no)
    return value % (1 << width)


@dataclass
class _Stmt:
    line_no: int
    labels: list
    kind: str          # "insn", "dir"
    name: str
    args: list
    tags: frozenset
    text: str


def _parse(source: str) -> list[_Stmt]:
    stmts = []
    pending_labels: list[str] = []
    for line_no, raw in enumerate(source.splitlines(), 1):
        tags = frozenset()
        code = raw
        if ";" in raw:
            code, comment = raw.split(";", 1)
            comment = comment.strip()
            if comment.startswith("@"):
                tags = frozenset(t.strip() for t in comment[1:].split(",") if t.strip())
        code = code.strip()
        while True:
            m = _LABEL.match(code)
            if not m or m.group(1).startswith("."):
                break
            pending_labels.append(m.group(1))
            code = m.group(2).strip()
        if not code:
            continue
        head, _, rest = code.partition(" ")
        head = head.strip()
        if head.startswith("."):
            stmts.append(_Stmt(line_no, pending_labels, "dir", head.lower(),
                               _split_operands(rest), tags, code))
        else:
            stmts.append(_Stmt(line_no, pending_labels, "insn", head.upper(),
                               _split_operands(rest), tags, code))
        pending_labels = []
    if pending_labels:
        stmts.append(_Stmt(0, pending_labels, "dir", ".label", [], frozenset(), ""))
    return stmts


def _insn_size(name: str, width: int, line_no: int) -> int:
    try:
        op = Op[name]
    except KeyError:
        raise AssemblyError(f"unknown mnemonic {name!r}", line_no) from None
    return Instruction(op, (0,) * len(op.layout), width).length


def _encode_insn(st: _Stmt, width: int, symbols: dict) -> Instruction:
    op = Op[st.name]
    args = st.args
    ln = st.line_no
    if op is Op.LOAD:
        if len(args) != 2:
            raise AssemblyError("LOAD takes rd, [rs+off]", ln)
        base, off = _mem_operand(args[1], symbols, width, ln)
        return Instruction(op, (parse_reg(args[0]), base, off), width)
    if op is Op.STORE:
        if len(args) != 2:
            raise AssemblyError("STORE takes [rs+off], rs2", ln)
        base, off = _mem_operand(args[0], symbols, width, ln)
        return Instruction(op, (base, off, parse_reg(args[1])), width)
    if len(args) != len(op.layout):
        raise AssemblyError(f"{op.name} takes {len(op.layout)} operands, got {len(args)}", ln)
    values = []
    for kind, arg in zip(op.layout, args):
        if kind == "r":
            try:
                values.append(parse_reg(arg))
            except ValueError as exc:
                raise AssemblyError(str(exc), ln) from None
        else:
            values.append(_fit(_eval(arg, symbols, ln), width, ln))
    return Instruction(op, tuple(values), width)


def _mem_operand(text: str, symbols: dict, width: int, line_no: int) -> tuple[int, int]:
    m = _MEM.match(text.strip())
    if not m:
        raise AssemblyError(f"bad memory operand {text!r}", line_no)
    try:
        base = parse_reg(m.group(1))
    except ValueError as exc:
        raise AssemblyError(str(exc), line_no) from None
    off = 0
    if m.group(3):
        off = _eval(m.group(3), symbols, line_no)
        if m.group(2) == "-":
            off = -off
    return base, _fit(off, width, line_no)


def _layout(stmts, width: int, base: int, symbols: dict | None):
    """Walk statements computing addresses.  Returns (labels, code_end, org)."""
    labels: dict[str, int] = {}
    addr = None
    org = None
    code_end = None
    for st in stmts:
        if st.kind == "dir" and st.name == ".org" and addr is None:
            org = _eval(st.args[0], symbols, st.line_no) if st.args else base
            addr = org
        if addr is None:
            org = base
            addr = base
        for lab in st.labels:
            if lab in labels:
                raise AssemblyError(f"duplicate label {lab!r}", st.line_no)
            labels[lab] = addr
        if st.kind == "insn":
            addr += _insn_size(st.name, width, st.line_no)
        elif st.name == ".byte":
            addr += len(st.args)
        elif st.name == ".word":
            addr += len(st.args) * (width // 8)
        elif st.name == ".zero":
            addr += _eval(st.args[0], symbols, st.line_no)
        elif st.name == ".org":
            target = _eval(st.args[0], symbols, st.line_no)
            if target < addr:
                raise AssemblyError(".org moves backwards", st.line_no)
            addr = target
        elif st.name == ".data" and code_end is None:
            code_end = addr
    if addr is None:
        org = addr = base
    return labels, code_end if code_end is not None else addr, org, addr


def assemble_listing(source: str, width: int = 32, base: int | None = None):
    """Assemble ``source``; returns ``(image, listing)``."""
    check_width(width)
    if base is None:
        base = default_base(width)
    stmts = _parse(source)
    for st in stmts:
        if st.kind == "dir" and st.name not in (".byte", ".word", ".zero", ".org", ".entry",
                                                 ".data", ".code", ".label"):
            raise AssemblyError(f"unknown directive {st.name!r}", st.line_no)
    labels, _, _, _ = _layout(stmts, width, base, None)
    labels, code_end, org, end = _layout(stmts, width, base, labels)

    out = bytearray()
    listing = []
    entry = org
    addr = org
    wb = width // 8
    for st in stmts:
        start = addr
        if st.kind == "insn":
            ins = _encode_insn(st, width, labels)
            out += ins.encode()
            addr += ins.length
            listing.append(ListingEntry(start, ins.length, "insn", str(ins), st.line_no,
                                        st.tags, tuple(st.labels)))
            continue
        if st.name == ".byte":
            for a in st.args:
                out.append(_fit(_eval(a, labels, st.line_no), 8, st.line_no))
            addr += len(st.args)
        elif st.name == ".word":
            for a in st.args:
                out += _fit(_eval(a, labels, st.line_no), width, st.line_no).to_bytes(wb, "little")
            addr += len(st.args) * wb
        elif st.name == ".zero":
            n = _eval(st.args[0], labels, st.line_no)
            out += bytes(n)
            addr += n
        elif st.name == ".org":
            target = _eval(st.args[0], labels, st.line_no)
            out += bytes(target - addr)
            addr = target
        elif st.name == ".entry":
            entry = _eval(st.args[0], labels, st.line_no)
        if addr > start:
            listing.append(ListingEntry(start, addr - start, "data", st.text, st.line_no,
                                        st.tags, tuple(st.labels)))
    if org + len(out) > (1 << width):
        raise AssemblyError("program does not fit in the address space")
    image = ProgramImage(width, org, bytes(out), entry, (org, code_end), labels)
    return image, listing


def assemble(source: str, width: int = 32, base: int | None = None) -> ProgramImage:
    return assemble_listing(source, width, base)[0]


def disassemble_listing(image: ProgramImage, addrs) -> str:
    """Render decoded instructions at ``addrs`` as re-assemblable text."""
    from .isa import decode
    lines = []
    for a in sorted(addrs):
        ins = decode(image, a)
        lines.append(f"{a:#06x}: {ins}" if ins else f"{a:#06x}: <{ins.reason}>")
    return "\n".join(lines)
