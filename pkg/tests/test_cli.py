import json

import pytest

from bbdse.cli import main
from bbdse.isa import ProgramImage
from bbdse.obfuscate import hand_sample
from bbdse.programs import PROGRAMS

from conftest import SQUARES, requires_solver


def _records(path):
    return [json.loads(ln) for ln in path.read_text().splitlines() if ln.strip()]


@pytest.fixture
def squares(tmp_path):
    src = tmp_path / "squares.s"
    src.write_text(SQUARES)
    assert main(["asm", str(src), "-o", str(tmp_path / "squares.img")]) == 0
    return tmp_path / "squares.img"


def test_asm_and_run(tmp_path, squares):
    img = ProgramImage.load(squares)
    assert img.width == 32
    assert main(["run", str(squares), "--input", "r0=3", "--input", "r1=0x10",
                 "-o", str(tmp_path / "t.tr")]) == 0
    assert (tmp_path / "t.tr").read_text()
    src = tmp_path / "p.s"
    src.write_text("MOVI r0, 1\nHALT\n")
    assert main(["asm", str(src), "--width", "8", "--listing", str(tmp_path / "p.lst")]) == 0
    assert ProgramImage.load(tmp_path / "p.img").width == 8
    assert "MOVI" in (tmp_path / "p.lst").read_text()


@requires_solver
def test_analyze_op_from_trace(tmp_path, squares):
    main(["run", str(squares), "--input", "r0=3", "--input", "r1=5", "-o", str(tmp_path / "t.tr")])
    out = tmp_path / "op.jsonl"
    assert main(["analyze-op", str(squares), "--trace", str(tmp_path / "t.tr"), "-k", "16",
                 "-o", str(out)]) == 0
    (rec,) = _records(out)
    assert rec["label"] == "OPAQUE"
    assert main(["analyze-op", str(squares), "-k", "2", "-o", str(out)]) == 0
    assert _records(out)[0]["label"] == "GENUINE"


@requires_solver
def test_stack_const_jumps_selfmod(tmp_path, capsys):
    src = tmp_path / "g.s"
    src.write_text(hand_sample("tamper_gadget"))
    main(["asm", str(src)])
    img = str(tmp_path / "g.img")
    out = tmp_path / "r.jsonl"
    assert main(["analyze-stack", img, "-o", str(out)]) == 0
    (rec,) = _records(out)
    assert "VIOLATED" in rec["label"] and "SINGLE" in rec["label"]
    assert main(["analyze-const", img, "--at", "5", "--reg", "r0", "-o", str(out)]) == 0
    assert _records(out)[0]["label"] == "OPAQUE_CONST"
    src.write_text(hand_sample("aspack_decoy"))
    main(["asm", str(src)])
    assert main(["analyze-selfmod", img, "-o", str(out)]) == 0
    assert [r["label"] for r in _records(out)] == ["UNCONDITIONAL"]


def test_usage_errors(tmp_path, squares):
    for argv in (["asm", str(tmp_path / "missing.s")],
                 ["analyze-op", str(tmp_path / "missing.img")],
                 ["analyze-op", str(squares), "--trace", str(tmp_path / "nope.tr")],
                 ["analyze-op", str(squares), "-k", "0"],
                 ["analyze-op", str(squares), "--width", "12"],
                 ["disasm", str(squares), "--mode", "magic"],
                 ["ksweep", str(tmp_path / "no_corpus")],
                 ["ksweep", str(tmp_path), "--ks", "4,-1"],
                 ["run", str(squares), "--input", "oops"],
                 ["analyze-const", str(squares), "--at", "500", "--reg", "r0"],
                 ["obfuscate", "--corpus"],
                 ["bogus"]):
        with pytest.raises(SystemExit) as e:
            main(argv)
        assert e.value.code == 2, argv


def test_operational_failure_is_one(tmp_path):
    bad = tmp_path / "bad.s"
    bad.write_text("FROB r0\n")
    assert main(["asm", str(bad)]) == 1


@requires_solver
def test_disasm_modes(tmp_path):
    p = PROGRAMS["simple_if"]
    src = tmp_path / "s.s"
    assert main(["obfuscate", "--corpus", "-o", str(tmp_path / "c"), "--programs", "simple_if",
                 "--seeds", "1", "--families", "2"]) == 0
    name = "simple_if_f2_s0"
    img = str(tmp_path / "c" / f"{name}.img")
    inputs = tmp_path / "in.json"
    inputs.write_text(json.dumps(p.inputs(0, 32)))
    counts = {}
    for mode in ("linear", "recursive", "dynamic", "sparse"):
        out = tmp_path / f"{mode}.jsonl"
        dot = tmp_path / f"{mode}.dot"
        assert main(["disasm", img, "--mode", mode, "--inputs-json", str(inputs),
                     "--source", str(tmp_path / "c" / f"{name}.s"), "--dot", str(dot),
                     "-o", str(out)]) == 0
        metrics = [r for r in _records(out) if r["kind"] == "disasm"]
        counts[mode] = metrics[0]
        assert dot.read_text().startswith("digraph")
    assert counts["sparse"]["over"] == counts["sparse"]["under"] == 0
    assert counts["recursive"]["over"] > 0
    assert counts["linear"]["count"] >= counts["recursive"]["count"]
    red = tmp_path / "red.s"
    assert main(["simplify", img, "--inputs-json", str(inputs), "-o", str(red)]) == 0
    assert main(["asm", str(red)]) == 0


@requires_solver
def test_obfuscate_single_and_ksweep(tmp_path, capsys):
    src = tmp_path / "b.s"
    src.write_text(PROGRAMS["bubble_sort"].source(32))
    inputs = tmp_path / "in.json"
    inputs.write_text(json.dumps(PROGRAMS["bubble_sort"].inputs(0, 32)))
    assert main(["obfuscate", str(src), "--family", "5", "--count", "2",
                 "--inputs-json", str(inputs)]) == 0
    truth = (tmp_path / "b.obf.truth").read_text().splitlines()
    assert sum(ln.startswith("OP 5") for ln in truth) == 2
    with pytest.raises(SystemExit):
        main(["obfuscate", str(src)])
    main(["obfuscate", "--corpus", "-o", str(tmp_path / "c"), "--programs", "bubble_sort",
          "--seeds", "1", "--families", "1,5"])
    out = tmp_path / "ks.jsonl"
    assert main(["ksweep", str(tmp_path / "c"), "--ks", "16,2", "-o", str(out)]) == 0
    rows = _records(out)
    assert [r["k"] for r in rows] == [2, 16] and rows[1]["fn"] == 0
    assert main(["report", str(out)]) == 0
    assert "ksweep" in capsys.readouterr().out


@requires_solver
def test_compare_dse(tmp_path, squares):
    out = tmp_path / "c.jsonl"
    assert main(["compare-dse", str(squares), "--input", "r0=1", "--input", "r1=2",
                 "-o", str(out)]) == 0
    rows = {r["method"]: r for r in _records(out)}
    assert rows["forward"]["unsat"] == rows["bbdse k=16"]["unsat"] == 1
    with pytest.raises(SystemExit):
        main(["compare-dse", str(squares), "--methods", "sideways"])


def test_solver_from_environment(tmp_path, squares, monkeypatch):
    monkeypatch.setenv("BBDSE_SOLVER", str(tmp_path / "no-such-solver"))
    out = tmp_path / "op.jsonl"
    # an explicitly configured solver that is missing is an operational failure
    assert main(["analyze-op", str(squares), "--input", "r0=3", "--input", "r1=5",
                 "-o", str(out)]) == 1
    assert main(["analyze-op", str(squares), "--solver", str(tmp_path / "other")]) == 1
