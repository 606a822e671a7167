"""Base programs used to build the obfuscation corpora.

Every program follows the same conventions so the obfuscator can rewrite it
safely: only r0-r4 are used (r5-r7 are free scratch for injected code),
labels sit on their own lines, the code ends at ``.data`` and the entry is
``_start: CALL main; HALT``.  Loop bounds are assembly-time constants, which
is what produces the dead-path effect in forward symbolic execution.
"""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Callable

from .assembler import assemble
from .tracer import Trace, run


@dataclass(frozen=True)
class BaseProgram:
    name: str
    template: str
    default_size: int
    make_inputs: Callable          # (rng, size, width) -> dict
    outputs: tuple                 # ("reg", name) or ("mem", symbol, words)
    multipath: bool = False

    def source(self, width: int = 32, size: int | None = None) -> str:
        n = self.default_size if size is None else size
        wb = width // 8
        return self.template.format(WB=wb, W2=2 * wb, W8=8 * wb, N=n, N1=n - 1,
                                    NWB=n * wb, NNWB=n * n * wb, NW2=2 * n * wb,
                                    K=max(8, n // 2), KWB=max(8, n // 2) * wb)

    def inputs(self, seed: int, width: int = 32, size: int | None = None) -> dict:
        n = self.default_size if size is None else size
        rng = random.Random(f"{self.name}:{seed}:{n}")
        inp = self.make_inputs(rng, n, width)
        inp["gx"] = rng.randrange(1 << width)
        inp["gy"] = rng.randrange(1 << width)
        return inp

    def image(self, width: int = 32, size: int | None = None):
        return assemble(self.source(width, size), width)


def observe(trace: Trace, outputs) -> tuple:
    """Values of the designated outputs at the end of ``trace``."""
    wb = trace.width // 8
    syms = trace.program.symbols
    vals = []
    for out in outputs:
        if out[0] == "reg":
            vals.append(trace.value_before(out[1], len(trace)))
        else:
            base = syms[out[1]]
            vals.append(tuple(trace.final_word(base + i * wb) for i in range(out[2])))
    return tuple(vals)


def _words(rng, n, width, hi=None):
    hi = (1 << width) if hi is None else hi
    return [rng.randrange(hi) for _ in range(n)]


_PROLOGUE = """\
_start:
    CALL main
    HALT
"""

SIMPLE_IF = _PROLOGUE + """\
main:
    MOVI r0, 0
    MOVI r1, 0
    MOVI r4, 0
si_loop:
    MOVI r3, {N}
    SLT r3, r1, r3
    JZ r3, si_done
    MOV r2, r1
    MULI r2, {WB}
    ADDI r2, arr
    LOAD r2, [r2+0]
    MOVI r3, 50
    ULT r3, r2, r3
    JZ r3, si_big
    ADD r0, r2
    JMP si_parity
si_big:
    SUBI r0, 1
si_parity:
    MOV r3, r2
    ANDI r3, 1
    JZ r3, si_even
    ADDI r4, 1
si_even:
    MOV r3, r1
    ANDI r3, 7
    MOVI r2, 5
    EQ r3, r3, r2
    JZ r3, si_next
    CALL si_special
si_next:
    ADDI r1, 1
    JMP si_loop
si_done:
    MOVI r3, result
    STORE [r3+0], r0
    STORE [r3+{WB}], r4
    RET
si_special:
    MOVI r3, special
    LOAD r2, [r3+0]
    ADDI r2, 3
    STORE [r3+0], r2
    XORI r0, 0x55
    RET
.data
gx:
    .word 0
gy:
    .word 0
special:
    .word 0
result:
    .word 0, 0
arr:
    .zero {NWB}
"""

BIN_SEARCH = _PROLOGUE + """\
main:
    MOVI r4, 0
bs_outer:
    MOVI r3, {K}
    SLT r3, r4, r3
    JZ r3, bs_end
    MOV r3, r4
    MULI r3, {WB}
    ADDI r3, keys
    LOAD r0, [r3+0]
    PUSH r4
    CALL bsearch
    POP r4
    MOV r3, r4
    MULI r3, {WB}
    ADDI r3, found
    STORE [r3+0], r0
    ADDI r4, 1
    JMP bs_outer
bs_end:
    RET
bsearch:
    MOVI r1, 0
    MOVI r2, {N1}
bs_loop:
    MOV r4, r1
    ADD r4, r2
    SHRI r4, 1
    MOV r3, r4
    MULI r3, {WB}
    ADDI r3, arr
    LOAD r3, [r3+0]
    EQ r3, r3, r0
    JNZ r3, bs_hit
    MOV r3, r4
    MULI r3, {WB}
    ADDI r3, arr
    LOAD r3, [r3+0]
    ULT r3, r3, r0
    JZ r3, bs_left
    MOV r1, r4
    ADDI r1, 1
    JMP bs_test
bs_left:
    MOV r2, r4
    SUBI r2, 1
bs_test:
    SGE r3, r2, r1
    JNZ r3, bs_loop
    MOVI r0, -1
    RET
bs_hit:
    MOV r0, r4
    RET
.data
gx:
    .word 0
gy:
    .word 0
found:
    .zero {KWB}
keys:
    .zero {KWB}
arr:
    .zero {NWB}
"""

BUBBLE_SORT = _PROLOGUE + """\
main:
    MOVI r1, 0
bb_outer:
    MOVI r3, {N1}
    SLT r3, r1, r3
    JZ r3, bb_done
    MOVI r2, 0
bb_inner:
    MOVI r3, {N1}
    SUB r3, r1
    SLT r3, r2, r3
    JZ r3, bb_next
    MOV r3, r2
    MULI r3, {WB}
    ADDI r3, arr
    LOAD r0, [r3+0]
    LOAD r4, [r3+{WB}]
    ULT r4, r4, r0
    JZ r4, bb_keep
    CALL swap
bb_keep:
    ADDI r2, 1
    JMP bb_inner
bb_next:
    ADDI r1, 1
    JMP bb_outer
bb_done:
    MOVI r3, arr
    LOAD r0, [r3+0]
    RET
swap:
    LOAD r0, [r3+0]
    LOAD r4, [r3+{WB}]
    STORE [r3+0], r4
    STORE [r3+{WB}], r0
    RET
.data
gx:
    .word 0
gy:
    .word 0
arr:
    .zero {NWB}
"""

MAT_MULT = _PROLOGUE + """\
main:
    MOVI r0, 0
mm_rows:
    MOVI r3, {N}
    SLT r3, r0, r3
    JZ r3, mm_done
    MOVI r1, 0
mm_cols:
    CALL dot
    MOV r3, r0
    MULI r3, {N}
    ADD r3, r1
    MULI r3, {WB}
    ADDI r3, matc
    STORE [r3+0], r4
    EQ r3, r0, r1
    JZ r3, mm_offdiag
    CALL mm_diag
mm_offdiag:
    ADDI r1, 1
    MOVI r3, {N}
    SLT r3, r1, r3
    JNZ r3, mm_cols
    ADDI r0, 1
    JMP mm_rows
mm_done:
    RET
mm_diag:
    MOVI r3, diag
    LOAD r2, [r3+0]
    ADD r2, r4
    STORE [r3+0], r2
    RET
dot:
    MOVI r3, 0
    PUSH r3
    MOVI r2, 0
dot_loop:
    MOV r3, r0
    MULI r3, {N}
    ADD r3, r2
    MULI r3, {WB}
    ADDI r3, mata
    LOAD r4, [r3+0]
    MOV r3, r2
    MULI r3, {N}
    ADD r3, r1
    MULI r3, {WB}
    ADDI r3, matb
    LOAD r3, [r3+0]
    MUL r4, r3
    POP r3
    ADD r3, r4
    PUSH r3
    ADDI r2, 1
    MOVI r3, {N}
    SLT r3, r2, r3
    JNZ r3, dot_loop
    POP r4
    RET
.data
gx:
    .word 0
gy:
    .word 0
diag:
    .word 0
mata:
    .zero {NNWB}
matb:
    .zero {NNWB}
matc:
    .zero {NNWB}
"""

# Command interpreter: the canonical inputs only ever issue one or two of the
# commands, so most of the handlers stay unexecuted.
DISPATCH = _PROLOGUE + """\
main:
    MOVI r0, 0
    MOVI r1, 0
dp_loop:
    MOVI r3, {N}
    SLT r3, r1, r3
    JZ r3, dp_done
    MOV r3, r1
    MULI r3, {W2}
    ADDI r3, cmds
    LOAD r2, [r3+0]
    LOAD r4, [r3+{WB}]
    MOVI r3, 1
    EQ r3, r2, r3
    JZ r3, dp_c2
    CALL h_add
    JMP dp_next
dp_c2:
    MOVI r3, 2
    EQ r3, r2, r3
    JZ r3, dp_c3
    CALL h_mul
    JMP dp_next
dp_c3:
    MOVI r3, 3
    EQ r3, r2, r3
    JZ r3, dp_c4
    CALL h_mix
    JMP dp_next
dp_c4:
    MOVI r3, 4
    EQ r3, r2, r3
    JZ r3, dp_c5
    CALL h_shift
    JMP dp_next
dp_c5:
    MOVI r3, 5
    EQ r3, r2, r3
    JZ r3, dp_c6
    CALL h_store
    JMP dp_next
dp_c6:
    MOVI r3, 6
    EQ r3, r2, r3
    JZ r3, dp_c7
    CALL h_sum
    JMP dp_next
dp_c7:
    MOVI r3, 7
    EQ r3, r2, r3
    JZ r3, dp_c8
    CALL h_crc
    JMP dp_next
dp_c8:
    MOVI r3, 8
    EQ r3, r2, r3
    JZ r3, dp_c9
    CALL h_clamp
    JMP dp_next
dp_c9:
    MOVI r3, 9
    EQ r3, r2, r3
    JZ r3, dp_bad
    CALL h_hist
    JMP dp_next
dp_bad:
    CALL h_bad
dp_next:
    ADDI r1, 1
    JMP dp_loop
dp_done:
    MOVI r3, acc
    STORE [r3+0], r0
    RET
h_add:
    MOVI r3, 150
    ULT r3, r3, r4
    JZ r3, h_add_ok
    MOVI r4, 150
h_add_ok:
    ADD r0, r4
    RET
h_mul:
    MOV r3, r4
    ANDI r3, 15
    ADDI r3, 1
    MUL r0, r3
    MOVI r3, 0xffff
    AND r0, r3
    MOVI r3, 0
    EQ r3, r0, r3
    JZ r3, h_mul_ok
    MOVI r0, 1
h_mul_ok:
    MOVI r3, stats
    LOAD r2, [r3+0]
    ADDI r2, 1
    STORE [r3+0], r2
    RET
h_mix:
    XOR r0, r4
    MOV r3, r0
    SHRI r3, 3
    XOR r0, r3
    MOV r3, r0
    SHLI r3, 5
    ADD r0, r3
    MOVI r3, 0x7fff
    AND r0, r3
    MOVI r3, stats
    LOAD r2, [r3+{WB}]
    ADDI r2, 1
    STORE [r3+{WB}], r2
    RET
h_shift:
    MOV r3, r4
    ANDI r3, 7
    MOV r2, r0
    SHL r2, r3
    MOVI r3, 8
    SUB r3, r4
    ANDI r3, 7
    SHR r0, r3
    OR r0, r2
    MOVI r3, 0xffff
    AND r0, r3
    MOVI r3, stats
    LOAD r2, [r3+{W2}]
    ADDI r2, 1
    STORE [r3+{W2}], r2
    RET
h_store:
    MOV r3, r4
    ANDI r3, 7
    MULI r3, {WB}
    ADDI r3, slots
    STORE [r3+0], r0
    MOVI r2, 0
    ULT r2, r2, r0
    JNZ r2, h_store_ok
    ADDI r0, 7
h_store_ok:
    ADDI r0, 1
    RET
h_sum:
    PUSH r1
    MOVI r2, 0
    MOVI r1, 0
h_sum_loop:
    MOVI r3, 8
    SLT r3, r1, r3
    JZ r3, h_sum_end
    MOV r3, r1
    MULI r3, {WB}
    ADDI r3, slots
    LOAD r4, [r3+0]
    ADD r2, r4
    ADDI r1, 1
    JMP h_sum_loop
h_sum_end:
    POP r1
    ADD r0, r2
    MOVI r3, 0xffff
    AND r0, r3
    RET
h_crc:
    PUSH r1
    MOVI r1, 0
    MOV r2, r0
h_crc_loop:
    MOVI r3, 8
    SLT r3, r1, r3
    JZ r3, h_crc_end
    MOV r3, r1
    MULI r3, {WB}
    ADDI r3, slots
    LOAD r3, [r3+0]
    XOR r2, r3
    MOV r3, r2
    ANDI r3, 1
    JZ r3, h_crc_even
    SHRI r2, 1
    XORI r2, 0x5a5a
    JMP h_crc_next
h_crc_even:
    SHRI r2, 1
h_crc_next:
    ADDI r1, 1
    JMP h_crc_loop
h_crc_end:
    POP r1
    MOV r0, r2
    MOVI r3, 0xffff
    AND r0, r3
    RET
h_clamp:
    MOV r3, r4
    ANDI r3, 0xff
    ULT r2, r0, r3
    JZ r2, h_clamp_hi
    MOV r0, r3
    JMP h_clamp_done
h_clamp_hi:
    MOV r2, r4
    SHRI r2, 8
    ANDI r2, 0xff
    ADDI r2, 0x100
    ULT r3, r2, r0
    JZ r3, h_clamp_done
    MOV r0, r2
h_clamp_done:
    MOVI r3, stats
    LOAD r2, [r3+0]
    ADD r2, r0
    STORE [r3+0], r2
    RET
h_hist:
    MOV r3, r4
    ANDI r3, 7
    MULI r3, {WB}
    ADDI r3, slots
    LOAD r2, [r3+0]
    ADDI r2, 1
    STORE [r3+0], r2
    MOVI r3, 100
    ULT r3, r3, r2
    JZ r3, h_hist_ok
    MOV r3, r4
    ANDI r3, 7
    MULI r3, {WB}
    ADDI r3, slots
    MOVI r2, 0
    STORE [r3+0], r2
    ADDI r0, 1
h_hist_ok:
    RET
h_bad:
    MOVI r3, errors
    LOAD r2, [r3+0]
    ADDI r2, 1
    STORE [r3+0], r2
    XORI r0, 0x1234
    SHRI r0, 1
    RET
.data
gx:
    .word 0
gy:
    .word 0
acc:
    .word 0
errors:
    .word 0
stats:
    .word 0, 0, 0
slots:
    .zero {W8}
cmds:
    .zero {NW2}
"""


def _simple_if_inputs(rng, n, width):
    return {"arr": _words(rng, n, width, 120)}


def _bin_search_inputs(rng, n, width):
    arr = sorted(rng.sample(range(1, 4 * n + 1), n))
    keys = [rng.choice(arr) if i % 2 == 0 else rng.randrange(4 * n + 2) for i in range(max(8, n // 2))]
    return {"arr": arr, "keys": keys}


def _bubble_inputs(rng, n, width):
    return {"arr": _words(rng, n, width, 1 << min(width, 16))}


def _mat_inputs(rng, n, width):
    return {"mata": _words(rng, n * n, width, 10), "matb": _words(rng, n * n, width, 10)}


def _dispatch_inputs(rng, n, width):
    cmds = []
    for _ in range(n):
        cmds += [1, rng.randrange(1, 200)]
    return {"cmds": cmds}


PROGRAMS = {
    "simple_if": BaseProgram("simple_if", SIMPLE_IF, 8, _simple_if_inputs,
                             (("reg", "r0"), ("mem", "result", 2), ("mem", "special", 1))),
    "bin_search": BaseProgram("bin_search", BIN_SEARCH, 16, _bin_search_inputs,
                              (("mem", "found", 8),)),
    "bubble_sort": BaseProgram("bubble_sort", BUBBLE_SORT, 8, _bubble_inputs,
                               (("reg", "r0"), ("mem", "arr", 8))),
    "mat_mult": BaseProgram("mat_mult", MAT_MULT, 3, _mat_inputs,
                            (("mem", "matc", 9), ("mem", "diag", 1))),
    "dispatch": BaseProgram("dispatch", DISPATCH, 6, _dispatch_inputs,
                            (("reg", "r0"), ("mem", "acc", 1), ("mem", "stats", 3)),
                            multipath=True),
}

# sizes giving traces of several thousand steps
LONG_SIZES = {"simple_if": 400, "bin_search": 96, "bubble_sort": 30, "mat_mult": 7,
              "dispatch": 300}


def program_outputs(prog: BaseProgram, size: int | None = None) -> tuple:
    n = prog.default_size if size is None else size
    outs = []
    for out in prog.outputs:
        if out[0] == "mem" and out[1] == "arr":
            out = ("mem", "arr", n)
        elif out[0] == "mem" and out[1] == "found":
            out = ("mem", "found", max(8, n // 2))
        elif out[0] == "mem" and out[1] == "matc":
            out = ("mem", "matc", n * n)
        outs.append(out)
    return tuple(outs)


def run_program(prog: BaseProgram, seed: int = 0, width: int = 32, size: int | None = None):
    img = prog.image(width, size)
    return run(img, prog.inputs(seed, width, size))
