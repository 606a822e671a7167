"""Hash-consed bitvector terms.

Terms are interned, so structurally equal terms are the same object and can
be compared with ``is``.  Booleans are width-1 bitvectors.  Smart
constructors fold constants and apply a handful of local rewrites that keep
byte-level memory traffic readable (extract/concat fusion, comparison
negation through zero-extension).
"""

from __future__ import annotations

import weakref

import numpy as np

from .tracer import alu, compare

BINOPS = ("add", "sub", "mul", "udiv", "urem", "and", "or", "xor", "shl", "lshr")
CMPOPS = ("eq", "ne", "ult", "uge", "slt", "sge")
COMMUTATIVE = frozenset({"add", "mul", "and", "or", "xor", "eq", "ne"})
NEGATED = {"eq": "ne", "ne": "eq", "ult": "uge", "uge": "ult", "slt": "sge", "sge": "slt"}
SWAPPED = {"eq": "eq", "ne": "ne", "ult": "ugt", "uge": "ule", "slt": "sgt", "sge": "sle"}


class Term:
    __slots__ = ("op", "width", "param", "args", "__weakref__")

    def __init__(self, op, width, param, args):
        self.op = op
        self.width = width
        self.param = param
        self.args = args

    @property
    def is_const(self) -> bool:
        return self.op == "const"

    @property
    def is_var(self) -> bool:
        return self.op == "var"

    @property
    def value(self) -> int:
        assert self.op == "const"
        return self.param

    @property
    def name(self) -> str:
        assert self.op == "var"
        return self.param

    def __repr__(self) -> str:
        return to_text(self)

    def __reduce__(self):
        return (_rebuild, (self.op, self.width, self.param, self.args))


_table: "weakref.WeakValueDictionary" = weakref.WeakValueDictionary()


def _rebuild(op, width, param, args):
    return _intern(op, width, param, args)


def _intern(op, width, param, args=()):
    key = (op, width, param) + tuple(id(a) for a in args)
    t = _table.get(key)
    if t is None:
        t = Term(op, width, param, tuple(args))
        _table[key] = t
    return t


def const(value: int, width: int) -> Term:
    return _intern("const", width, value & ((1 << width) - 1))


def var(name: str, width: int) -> Term:
    return _intern("var", width, name)


TRUE = const(1, 1)
FALSE = const(0, 1)


def _check(a: Term, b: Term, op: str):
    if a.width != b.width:
        raise TypeError(f"width mismatch in {op}: {a.width} vs {b.width}")


def binop(op: str, a: Term, b: Term) -> Term:
    _check(a, b, op)
    w = a.width
    if a.is_const and b.is_const:
        return const(alu(op, a.value, b.value, w), w)
    if op in COMMUTATIVE and a.is_const:
        a, b = b, a
    if b.is_const:
        v = b.value
        mask = (1 << w) - 1
        if v == 0 and op in ("add", "sub", "or", "xor", "shl", "lshr"):
            return a
        if v == 0 and op in ("mul", "and"):
            return b
        if v == 1 and op in ("mul", "udiv"):
            return a
        if v == mask and op == "and":
            return a
        if v >= w and op in ("shl", "lshr"):
            return const(0, w)
        # fold chains of constant additions: (x + c1) + c2
        if op in ("add", "sub") and a.op in ("add", "sub") and a.args[1].is_const:
            c1 = a.args[1].value if a.op == "add" else -a.args[1].value
            c2 = v if op == "add" else -v
            return binop("add", a.args[0], const(c1 + c2, w))
    if a is b:
        if op in ("sub", "xor"):
            return const(0, w)
        if op in ("and", "or"):
            return a
    return _intern(op, w, None, (a, b))


def cmp(op: str, a: Term, b: Term) -> Term:
    _check(a, b, op)
    w = a.width
    if a.is_const and b.is_const:
        return const(compare(op, a.value, b.value, w), 1)
    if a is b:
        return TRUE if op in ("eq", "uge", "sge") else FALSE
    if op in ("eq", "ne") and a.is_const:
        a, b = b, a
    # zext(c) ==/!= 0|1 collapses to c or its negation
    if op in ("eq", "ne") and b.is_const and a.op == "zext" and a.args[0].width == 1:
        inner = a.args[0]
        if b.value > 1:
            return FALSE if op == "eq" else TRUE
        positive = (b.value == 1) == (op == "eq")
        return inner if positive else bnot(inner)
    if op in ("eq", "ne") and w == 1 and b.is_const:
        positive = (b.value == 1) == (op == "eq")
        return a if positive else bnot(a)
    return _intern(op, 1, None, (a, b))


def bnot(a: Term) -> Term:
    if a.is_const:
        return const(~a.value, a.width)
    if a.op == "not":
        return a.args[0]
    if a.width == 1 and a.op in NEGATED:
        return _intern(NEGATED[a.op], 1, None, a.args)
    return _intern("not", a.width, None, (a,))


def extract(a: Term, hi: int, lo: int) -> Term:
    if not (0 <= lo <= hi < a.width):
        raise ValueError(f"bad extract [{hi}:{lo}] of width {a.width}")
    if lo == 0 and hi == a.width - 1:
        return a
    if a.is_const:
        return const(a.value >> lo, hi - lo + 1)
    if a.op == "extract":
        base_lo = a.param[1]
        return extract(a.args[0], hi + base_lo, lo + base_lo)
    if a.op == "concat":
        high, low = a.args
        if hi < low.width:
            return extract(low, hi, lo)
        if lo >= low.width:
            return extract(high, hi - low.width, lo - low.width)
    if a.op == "zext":
        inner = a.args[0]
        if lo >= inner.width:
            return const(0, hi - lo + 1)
        if hi < inner.width:
            return extract(inner, hi, lo)
    return _intern("extract", hi - lo + 1, (hi, lo), (a,))


def concat(high: Term, low: Term) -> Term:
    if high.is_const and low.is_const:
        return const((high.value << low.width) | low.value, high.width + low.width)
    if high.op == "extract" and low.op == "extract" and high.args[0] is low.args[0] \
            and high.param[1] == low.param[0] + 1:
        return extract(high.args[0], high.param[0], low.param[1])
    # re-associate so adjacent extracts of the same term can meet
    if low.op == "concat" and high.op == "extract":
        fused = concat(high, low.args[0])
        if fused.op == "extract":
            return concat(fused, low.args[1])
    return _intern("concat", high.width + low.width, None, (high, low))


def zext(a: Term, extra: int) -> Term:
    if extra == 0:
        return a
    if a.is_const:
        return const(a.value, a.width + extra)
    return _intern("zext", a.width + extra, extra, (a,))


def ite(c: Term, a: Term, b: Term) -> Term:
    _check(a, b, "ite")
    if c.width != 1:
        raise TypeError("ite condition must have width 1")
    if c.is_const:
        return a if c.value else b
    if a is b:
        return a
    return _intern("ite", a.width, None, (c, a, b))


def conj(*terms: Term) -> Term:
    out = TRUE
    for t in terms:
        out = band(out, t)
    return out


def band(a, b):
    return binop("and", a, b)


def bor(a, b):
    return binop("or", a, b)


def mk(op: str, args, param=None) -> Term:
    """Rebuild a node of kind ``op`` through the smart constructors."""
    if op in BINOPS:
        return binop(op, *args)
    if op in CMPOPS:
        return cmp(op, *args)
    if op == "not":
        return bnot(args[0])
    if op == "extract":
        return extract(args[0], *param)
    if op == "concat":
        return concat(*args)
    if op == "zext":
        return zext(args[0], param)
    if op == "ite":
        return ite(*args)
    raise ValueError(op)


# -- traversal ---------------------------------------------------------------

def postorder(roots) -> list:
    """Every distinct node reachable from ``roots``, children before parents."""
    seen = set()
    order = []
    for root in roots:
        if id(root) in seen:
            continue
        stack = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for child in reversed(node.args):
                if id(child) not in seen:
                    stack.append((child, False))
    return order


def variables(*roots) -> set:
    return {n.name for n in postorder(roots) if n.op == "var"}


def var_terms(*roots) -> list:
    return [n for n in postorder(roots) if n.op == "var"]


def size(*roots) -> int:
    return len(postorder(roots))


def substitute(root: Term, mapping: dict, memo: dict | None = None) -> Term:
    """Replace variables (by name) according to ``mapping`` (name -> Term)."""
    memo = {} if memo is None else memo
    for node in postorder([root]):
        if id(node) in memo:
            continue
        if node.op == "var":
            memo[id(node)] = mapping.get(node.name, node)
        elif node.op == "const":
            memo[id(node)] = node
        else:
            args = tuple(memo[id(a)] for a in node.args)
            if all(x is y for x, y in zip(args, node.args)):
                memo[id(node)] = node
            else:
                memo[id(node)] = mk(node.op, args, node.param)
    return memo[id(root)]


# -- evaluation --------------------------------------------------------------

def evaluate(root: Term, env: dict, memo: dict | None = None) -> int:
    """Concrete value of ``root`` under ``env`` (variable name -> int)."""
    memo = {} if memo is None else memo
    for node in postorder([root]):
        key = id(node)
        if key in memo:
            continue
        op = node.op
        if op == "const":
            val = node.param
        elif op == "var":
            val = env[node.param]
        else:
            a = [memo[id(x)] for x in node.args]
            w = node.width
            if op in BINOPS:
                val = alu(op, a[0], a[1], w)
            elif op in CMPOPS:
                val = compare(op, a[0], a[1], node.args[0].width)
            elif op == "not":
                val = ~a[0] & ((1 << w) - 1)
            elif op == "extract":
                hi, lo = node.param
                val = (a[0] >> lo) & ((1 << (hi - lo + 1)) - 1)
            elif op == "concat":
                val = (a[0] << node.args[1].width) | a[1]
            elif op == "zext":
                val = a[0]
            elif op == "ite":
                val = a[1] if a[0] else a[2]
            else:
                raise ValueError(op)
        memo[key] = val
    return memo[id(root)]


def evaluate_np(roots, env: dict, memo: dict | None = None) -> list:
    """Vectorised evaluation; ``env`` maps names to uint64 arrays of equal length."""
    memo = {} if memo is None else memo
    n = len(next(iter(env.values()))) if env else 1
    for node in postorder(roots):
        key = id(node)
        if key in memo:
            continue
        op = node.op
        w = node.width
        mask = np.uint64((1 << w) - 1)
        if op == "const":
            val = np.full(n, node.param, dtype=np.uint64)
        elif op == "var":
            val = env[node.param]
        else:
            a = [memo[id(x)] for x in node.args]
            if op == "add":
                val = (a[0] + a[1]) & mask
            elif op == "sub":
                val = (a[0] - a[1]) & mask
            elif op == "mul":
                val = (a[0] * a[1]) & mask
            elif op == "udiv":
                safe = np.where(a[1] == 0, np.uint64(1), a[1])
                val = np.where(a[1] == 0, mask, a[0] // safe)
            elif op == "urem":
                safe = np.where(a[1] == 0, np.uint64(1), a[1])
                val = np.where(a[1] == 0, a[0], a[0] % safe)
            elif op == "and":
                val = a[0] & a[1]
            elif op == "or":
                val = a[0] | a[1]
            elif op == "xor":
                val = a[0] ^ a[1]
            elif op in ("shl", "lshr"):
                big = a[1] >= np.uint64(w)
                amt = np.where(big, np.uint64(0), a[1])
                shifted = (a[0] << amt) & mask if op == "shl" else a[0] >> amt
                val = np.where(big, np.uint64(0), shifted)
            elif op in CMPOPS:
                x, y = a
                if op in ("slt", "sge"):
                    sign = np.uint64(1 << (node.args[0].width - 1))
                    x, y = x ^ sign, y ^ sign
                res = {"eq": x == y, "ne": x != y, "ult": x < y, "uge": x >= y,
                       "slt": x < y, "sge": x >= y}[op]
                val = res.astype(np.uint64)
            elif op == "not":
                val = ~a[0] & mask
            elif op == "extract":
                hi, lo = node.param
                val = (a[0] >> np.uint64(lo)) & mask
            elif op == "concat":
                val = (a[0] << np.uint64(node.args[1].width)) | a[1]
            elif op == "zext":
                val = a[0]
            elif op == "ite":
                val = np.where(a[0] != 0, a[1], a[2])
            else:
                raise ValueError(op)
        memo[key] = val
    return [memo[id(r)] for r in roots]


# -- printing ----------------------------------------------------------------

_SMT_OPS = {"add": "bvadd", "sub": "bvsub", "mul": "bvmul", "udiv": "bvudiv",
            "urem": "bvurem", "and": "bvand", "or": "bvor", "xor": "bvxor",
            "shl": "bvshl", "lshr": "bvlshr", "not": "bvnot", "concat": "concat"}
_SMT_CMP = {"eq": "=", "ne": "distinct", "ult": "bvult", "uge": "bvuge",
            "slt": "bvslt", "sge": "bvsge"}


def smt_const(value: int, width: int) -> str:
    if width % 4 == 0:
        return "#x" + format(value, f"0{width // 4}x")
    return "#b" + format(value, f"0{width}b")


def smt_node(node: Term, ref) -> str:
    """SMT-LIB text for one node; ``ref`` renders its children."""
    op = node.op
    if op == "const":
        return smt_const(node.param, node.width)
    if op == "var":
        return node.param
    args = [ref(a) for a in node.args]
    if op in _SMT_OPS:
        return f"({_SMT_OPS[op]} {' '.join(args)})"
    if op in _SMT_CMP:
        return f"(ite ({_SMT_CMP[op]} {args[0]} {args[1]}) #b1 #b0)"
    if op == "extract":
        return f"((_ extract {node.param[0]} {node.param[1]}) {args[0]})"
    if op == "zext":
        return f"((_ zero_extend {node.param}) {args[0]})"
    if op == "ite":
        return f"(ite (= {args[0]} #b1) {args[1]} {args[2]})"
    raise ValueError(op)


_INFIX = {"add": "+", "sub": "-", "mul": "*", "udiv": "/", "urem": "%", "and": "&",
          "or": "|", "xor": "^", "shl": "<<", "lshr": ">>", "eq": "==", "ne": "!=",
          "ult": "<u", "uge": ">=u", "slt": "<s", "sge": ">=s"}


def to_text(root: Term, limit: int = 2000) -> str:
    """Human-readable infix rendering (shared nodes are repeated)."""
    memo: dict = {}
    for node in postorder([root]):
        op = node.op
        if op == "const":
            s = str(node.param) if node.param < 1024 else hex(node.param)
        elif op == "var":
            s = node.param
        else:
            a = [memo[id(x)] for x in node.args]
            if op in _INFIX:
                s = f"({a[0]} {_INFIX[op]} {a[1]})"
            elif op == "not":
                s = f"~{a[0]}"
            elif op == "extract":
                s = f"{a[0]}[{node.param[0]}:{node.param[1]}]"
            elif op == "concat":
                s = f"({a[0]} ++ {a[1]})"
            elif op == "zext":
                s = f"zext({a[0]})"
            else:
                s = f"({a[0]} ? {a[1]} : {a[2]})"
        if len(s) > limit:
            s = s[:limit] + "..."
        memo[id(node)] = s
    return memo[id(root)]
