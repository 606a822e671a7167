import pytest

from bbdse.assembler import assemble, assemble_listing
from bbdse.detect import Opacity, OpacityStatus
from bbdse.disasm import (dynamic_disasm, linear_sweep, perfect_set, recursive, score, sparse,
                          to_dot)
from bbdse.estimators import SparseDisassembler
from bbdse.obfuscate import hand_sample, make_sample
from bbdse.programs import PROGRAMS
from bbdse.tracer import run

from conftest import requires_solver

STRAIGHT = "MOVI r0, 1\nADDI r0, 2\nMOV r1, r0\nHALT\n"


def _listing_insns(src, width=32):
    img, listing = assemble_listing(src, width)
    return img, {e.addr for e in listing if e.kind == "insn"}


def test_linear_on_pure_code():
    img, addrs = _listing_insns(STRAIGHT)
    assert linear_sweep(img).addrs == addrs


def test_linear_decodes_junk_bytes():
    img, addrs = _listing_insns("MOVI r0, 1\nHALT\n.byte 0x01, 0x02, 0x03, 0x04, 0x05\n")
    res = linear_sweep(img)
    assert addrs < res.addrs


def test_recursive_straight_line():
    img, addrs = _listing_insns(STRAIGHT)
    assert recursive(img).addrs == addrs


def test_recursive_stops_at_computed_jump():
    src = "MOVI r0, t\nJMPR r0\nHALT\nt:\nMOVI r1, 2\nHALT\n"
    img, addrs = _listing_insns(src)
    got = recursive(img).addrs
    assert img.symbols["t"] not in got and len(got) == 2
    with pytest.raises(ValueError):
        recursive(img, entries=[])


def test_dynamic_is_deduplicated_union():
    src = "MOVI r1, 3\nl:\nSUBI r1, 1\nJNZ r1, l\nJZ r0, z\nHALT\nz:\nMOVI r2, 1\nHALT\n"
    img = assemble(src, 32)
    a, b = run(img, {"r0": 0}), run(img, {"r0": 1})
    da, db = dynamic_disasm([a]), dynamic_disasm([b])
    assert len(da) == len({s.addr for s in a.steps})
    assert dynamic_disasm([a, b]).instructions == da.instructions | db.instructions
    with pytest.raises(ValueError):
        dynamic_disasm([])


def test_dynamic_sees_both_layers():
    img = assemble(hand_sample("aspack_decoy"), 32)
    res = dynamic_disasm([run(img)])
    patch = img.symbols["patch"]
    assert len(res.by_addr()[patch]) == 2


def test_score_perfect_and_overshoot():
    img, addrs = _listing_insns(STRAIGHT)
    perf = perfect_set(img, addrs)
    m = score(recursive(img), perf)
    assert (m.over, m.under) == (0, 0)
    m = score(dynamic_disasm([run(img)]), perfect_set(img, addrs | {999}))
    assert m.under == 0      # undecodable address contributes nothing


def test_report_mismatch():
    img = assemble(STRAIGHT, 32)
    tr = run(img)
    with pytest.raises(ValueError):
        sparse(img, [tr], {0xdead: OpacityStatus(0xdead, Opacity.OPAQUE, "taken")})
    with pytest.raises(ValueError):
        sparse(img, [])


@pytest.mark.parametrize("prog", sorted(PROGRAMS))
def test_sparse_equals_recursive_without_obfuscation(prog):
    s = make_sample(PROGRAMS[prog], 0)
    tr = run(s.image, s.inputs[0])
    got = sparse(s.image, [tr])
    assert got.instructions == recursive(s.image).instructions


def test_dynamic_misses_unexecuted_paths():
    s = make_sample(PROGRAMS["dispatch"], 0)
    tr = run(s.image, s.inputs[0])
    perf = perfect_set(s.image, s.legit_addrs(), [tr])
    m = score(dynamic_disasm([tr]), perf)
    assert m.under > 0 and m.over == 0


@requires_solver
@pytest.mark.parametrize("prog, family", [("simple_if", 2), ("bubble_sort", 6), ("dispatch", 8)])
def test_sparse_is_perfect_on_opaque_samples(prog, family):
    s = make_sample(PROGRAMS[prog], 3, family=family)
    tr = run(s.image, s.inputs[0])
    est = SparseDisassembler().fit([tr], image=s.image)
    perf = perfect_set(s.image, s.legit_addrs(), [tr])
    m = score(est.result_, perf)
    assert (m.over, m.under) == (0, 0)
    assert est.score(s.legit_addrs()) == 1.0
    rec = score(recursive(s.image), perf)
    assert rec.over > 0 and len(est.result_) < len(recursive(s.image))


@requires_solver
@pytest.mark.parametrize("scheme", ["PUSH_RET", "PUSH_CALL_RET_RET"])
def test_sparse_on_tampering_sample(scheme):
    s = make_sample(PROGRAMS["simple_if"], 1, scheme=scheme)
    tr = run(s.image, s.inputs[0])
    est = SparseDisassembler().fit([tr], image=s.image)
    got = est.result_.addrs
    for r in s.records:
        assert r.target in got
        assert not any(r.dead_lo <= a < r.dead_hi for a in got)
    assert est.predict([r.target for r in s.records]) == [True] * len(s.records)


def test_dot_output():
    img = assemble("MOVI r0, 1\nJZ r0, e\nHALT\ne:\nHALT\n", 32)
    res = recursive(img)
    dot = to_dot(res, {img.entry: "ALIVE"})
    assert dot.startswith("digraph cfg {") and dot.rstrip().endswith("}")
    assert dot.count("->") == len(res.edges)
    assert 'status="ALIVE"' in dot
