import pytest

from bbdse.assembler import assemble
from bbdse.isa import Op
from bbdse.obfuscate import hand_sample
from bbdse.tracer import branch_coverage, format_trace, parse_trace, run

from conftest import trace_of


def test_movi_halt():
    tr = trace_of("MOVI r0, 5\nHALT\n")
    assert len(tr) == 2 and tr.halted
    assert tr.final_regs()[0] == 5


def test_tampering_gadget_ret_target():
    src = """
_start:
    CALL fun
site:
    HALT
fun:
    PUSHI X
    RET
X:
    HALT
"""
    img = assemble(src, 32)
    tr = run(img)
    ret = next(s for s in tr.steps if s.instr.op is Op.RET)
    assert ret.jump_target == img.symbols["X"] != img.symbols["site"]


def test_aspack_decoy_layers():
    img = assemble(hand_sample("aspack_decoy"), 32)
    tr = run(img)
    patch = img.symbols["patch"]
    runs = [s for s in tr.steps if s.addr == patch]
    assert [s.layer for s in runs] == [0, 1]
    # the patched MOVI now loads 1, so the second pass leaves through `second`
    assert runs[1].instr.operands[1] == 1
    assert tr.halted and tr.final_regs()[0] == 1


def test_branch_coverage():
    tr = trace_of("MOVI r0, 1\nJNZ r0, t\nt:\nHALT\n")
    (cov,) = branch_coverage(tr).values()
    assert cov.taken_seen and not cov.fallthrough_seen
    loop = trace_of("MOVI r0, 3\nl:\nSUBI r0, 1\nJNZ r0, l\nHALT\n")
    (cov,) = branch_coverage(loop).values()
    assert cov.taken_seen and cov.fallthrough_seen
    skip = trace_of("JMP e\nJZ r0, e\ne:\nHALT\n")
    assert branch_coverage(skip) == {}


@pytest.mark.parametrize("width", [8, 16, 32])
def test_deterministic_and_replayable(width):
    src = """
_start:
    MOVI r1, buf
    LOAD r0, [r1+0]
    MOVI r2, 3
l:
    ADD r0, r2
    STORE [r1+0], r0
    SUBI r2, 1
    JNZ r2, l
    HALT
.data
buf:
    .word 0
"""
    img = assemble(src, width)
    a, b = run(img, {"buf": 9, "r5": 4}), run(img, {"buf": 9, "r5": 4})
    assert a.steps == b.steps
    back = parse_trace(format_trace(a), img)
    assert back.steps == a.steps and back.initial_regs == a.initial_regs
    for x, y in zip(back.steps, a.steps):
        assert x.effective_addrs == y.effective_addrs and x.jump_target == y.jump_target


def test_replay_mismatch_rejected():
    img = assemble("MOVI r0, 1\nJNZ r0, t\nHALT\nt:\nHALT\n", 32)
    text = format_trace(run(img))
    other = assemble("MOVI r0, 0\nJNZ r0, t\nHALT\nt:\nHALT\n", 32)
    with pytest.raises(ValueError):
        parse_trace(text, other)


def test_fault_on_undecodable_byte():
    tr = trace_of("MOVI r0, 1\n.byte 0xff\n")
    assert tr.fault and not tr.halted and len(tr) == 1


def test_input_outside_memory_rejected():
    img = assemble("HALT\n", 8)
    with pytest.raises(ValueError):
        run(img, {"0xff": [1, 2, 3]})
