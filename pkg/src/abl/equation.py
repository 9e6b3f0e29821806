"""Binary-equation domain knowledge: grammar, rule-parameterised calculator,
entailment, consistency and greedy abduction of bitwise rules and blanks."""
from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from . import logic
from .logic import Compound, Const, Var, make_list, list_items


class Sym(IntEnum):
    D0 = 0
    D1 = 1
    PLUS = 2
    EQ = 3


BLANK = None
ALPHABET = (Sym.D0, Sym.D1, Sym.PLUS, Sym.EQ)
_CHARS = "01+="
DIGITS = (0, 1)

# abduction preference order for rule results
RESULTS: tuple = ((0,), (1,), (1, 0), (1, 1), (0, 1), (0, 0))
RESULT_RANK = {r: i for i, r in enumerate(RESULTS)}
PAIRS = ((0, 0), (0, 1), (1, 0), (1, 1))


def seq_from_str(text: str) -> tuple:
    """'1+_=1' -> (1, 2, None, 3, 1); '_' marks a blank."""
    out = []
    for ch in text.replace(",", "").replace(" ", ""):
        out.append(BLANK if ch == "_" else _CHARS.index(ch))
    return tuple(out)


def seq_to_str(seq: Iterable[Optional[int]]) -> str:
    return "".join("_" if s is None else _CHARS[s] for s in seq)


class ParseFailure(ValueError):
    pass


class UndefinedRule(LookupError):
    def __init__(self, pair):
        super().__init__(f"no rule for pair {pair}")
        self.pair = pair


class CarryOverflow(ArithmeticError):
    pass


@dataclass(frozen=True)
class ParsedEquation:
    x: tuple
    y: tuple
    z: tuple

    def symbols(self) -> tuple:
        return self.x + (Sym.PLUS,) + self.y + (Sym.EQ,) + self.z


def _valid_digits(d: tuple) -> bool:
    return len(d) > 0 and (len(d) == 1 or d[0] == 1)


def parse_equation(seq: Sequence[int]) -> ParsedEquation:
    """Split ``x + y = z``; raises ParseFailure with a reason."""
    if any(s is None for s in seq):
        raise ParseFailure("sequence contains blanks")
    plus = [i for i, s in enumerate(seq) if s == Sym.PLUS]
    eq = [i for i, s in enumerate(seq) if s == Sym.EQ]
    if len(plus) != 1 or len(eq) != 1:
        raise ParseFailure(f"expected one '+' and one '=', got {len(plus)} and {len(eq)}")
    p, e = plus[0], eq[0]
    if p > e:
        raise ParseFailure("'=' precedes '+'")
    x, y, z = tuple(seq[:p]), tuple(seq[p + 1:e]), tuple(seq[e + 1:])
    for name, part in (("x", x), ("y", y), ("z", z)):
        if not part:
            raise ParseFailure(f"empty segment {name}")
        if not _valid_digits(part):
            raise ParseFailure(f"leading zero in {name}")
    return ParsedEquation(tuple(int(v) for v in x), tuple(int(v) for v in y),
                          tuple(int(v) for v in z))


@functools.lru_cache(maxsize=200_000)
def _parse(seq: tuple) -> Optional[tuple]:
    try:
        p = parse_equation(seq)
    except ParseFailure:
        return None
    return p.x, p.y, p.z


@dataclass(frozen=True)
class OpRuleSet:
    """A functional partial map (d1, d2) -> result digit list (``my_op`` facts)."""

    items: tuple = ()
    _map: dict = field(default=None, compare=False, hash=False, repr=False)

    def __post_init__(self):
        m = {}
        for pair, res in self.items:
            pair, res = tuple(pair), tuple(res)
            if pair in m and m[pair] != res:
                raise ValueError(f"conflicting rules for {pair}")
            if any(d not in DIGITS for d in pair + res) or len(res) not in (1, 2):
                raise ValueError(f"invalid rule {pair} -> {res}")
            m[pair] = res
        object.__setattr__(self, "items", tuple(sorted(m.items())))
        object.__setattr__(self, "_map", m)

    @classmethod
    def of(cls, mapping: Mapping) -> "OpRuleSet":
        return cls(tuple(mapping.items()))

    def get(self, pair):
        return self._map.get(pair)

    def __contains__(self, pair) -> bool:
        return pair in self._map

    def __len__(self) -> int:
        return len(self._map)

    def as_dict(self) -> dict:
        return dict(self._map)

    def extend(self, new: Mapping) -> "OpRuleSet":
        m = dict(self._map)
        for k, v in new.items():
            if k in m and m[k] != tuple(v):
                raise ValueError(f"extension conflicts on {k}")
            m[k] = tuple(v)
        return OpRuleSet.of(m)

    def is_subset(self, other: "OpRuleSet") -> bool:
        return all(other.get(p) == r for p, r in self.items)

    def to_text(self) -> str:
        return "\n".join(
            f"my_op({a},{b},[{','.join(map(str, r))}])" for (a, b), r in self.items)

    @classmethod
    def from_text(cls, text: str) -> "OpRuleSet":
        rules = {}
        for line in text.splitlines():
            line = line.strip().rstrip(".")
            if not line or line.startswith("%"):
                continue
            t = logic.parse_term(line)
            if not (isinstance(t, Compound) and t.functor == "my_op" and len(t.args) == 3):
                raise ValueError(f"not a my_op fact: {line!r}")
            a, b = (int(x.value) for x in t.args[:2])
            rules[(a, b)] = tuple(int(c.value) for c in list_items(t.args[2]))
        return cls.of(rules)

    def __str__(self) -> str:
        return self.to_text().replace("\n", " ")


ADDITION_TABLE = OpRuleSet.of({(0, 0): (0,), (0, 1): (1,), (1, 0): (1,), (1, 1): (1, 0)})
XOR_TABLE = OpRuleSet.of({(0, 0): (0,), (0, 1): (1,), (1, 0): (1,), (1, 1): (0,)})


def _strip(digits: list) -> tuple:
    i = 0
    while i < len(digits) - 1 and digits[i] == 0:
        i += 1
    return tuple(digits[i:])


def _calc(rules: Mapping, x: tuple, y: tuple):
    """Column adder; returns (result, None) or (None, missing_pair). Raises CarryOverflow."""
    n = max(len(x), len(y))
    xr = (0,) * (n - len(x)) + x
    yr = (0,) * (n - len(y)) + y
    carry = 0
    out = []
    for i in range(n - 1, -1, -1):
        pair = (xr[i], yr[i])
        res = rules.get(pair)
        if res is None:
            return None, pair
        digit, c1 = res[-1], int(len(res) == 2)
        c2 = 0
        if carry:
            res2 = rules.get((digit, 1))
            if res2 is None:
                return None, (digit, 1)
            digit, c2 = res2[-1], int(len(res2) == 2)
        if c1 and c2:
            raise CarryOverflow(f"double carry in column {n - 1 - i}")
        carry = c1 + c2
        out.append(digit)
    if carry:
        out.append(1)
    out.reverse()
    return _strip(out), None


def bitwise_calc(rules: OpRuleSet, x: Sequence[int], y: Sequence[int]) -> tuple:
    """Apply the rule table column by column (least significant first).

    Raises UndefinedRule naming the first missing pair, or CarryOverflow.
    """
    res, missing = _calc(rules._map, tuple(x), tuple(y))
    if missing is not None:
        raise UndefinedRule(missing)
    return res


def entails(rules: OpRuleSet, seq: Sequence[int]) -> Optional[bool]:
    """True/False when the equation is decided by ``rules``; None if unknown."""
    return _entails(rules, tuple(seq))


@functools.lru_cache(maxsize=500_000)
def _entails(rules: OpRuleSet, seq: tuple) -> Optional[bool]:
    parsed = _parse(seq)
    if parsed is None:
        return False
    x, y, z = parsed
    try:
        res, missing = _calc(rules._map, x, y)
    except CarryOverflow:
        return None
    if missing is not None:
        return None
    return res == z


@dataclass(frozen=True)
class LabeledSeq:
    seq: tuple
    label: bool


def consistency(rules: OpRuleSet, batch: Sequence[LabeledSeq]) -> int:
    n = 0
    for ex in batch:
        v = _entails(rules, tuple(ex.seq))
        if v is not None and v == bool(ex.label):
            n += 1
    return n


@dataclass(frozen=True)
class AbductionResult:
    rules: OpRuleSet
    completed: list
    consistent_mask: list

    @property
    def consistency(self) -> int:
        return sum(self.consistent_mask)


# --------------------------------------------------------------------------
# native abduction

def _extension_key(ext: Mapping) -> tuple:
    return (len(ext), tuple((p, RESULT_RANK[ext[p]]) for p in sorted(ext)))


def _all_extensions(rules: Mapping, x: tuple, y: tuple, z: tuple) -> list[dict]:
    """Every extension over looked-up pairs that makes the adder produce z."""
    found = []

    def go(ext):
        merged = {**rules, **ext}
        try:
            res, missing = _calc(merged, x, y)
        except CarryOverflow:
            return
        if missing is None:
            if res == z:
                found.append(dict(ext))
            return
        for r in RESULTS:
            ext[missing] = r
            go(ext)
            del ext[missing]

    go({})
    return found


@functools.lru_cache(maxsize=200_000)
def best_extension(rules: OpRuleSet, seq: tuple) -> Optional[tuple]:
    """Preferred rule extension making a blank-free positive example true.

    Preference: fewest new rules, then lexicographic over new rules sorted by
    pair, each ranked by RESULTS order.  Returns sorted items or None.
    """
    parsed = _parse(seq)
    if parsed is None:
        return None
    exts = _all_extensions(rules._map, *parsed)
    if not exts:
        return None
    best = min(exts, key=_extension_key)
    return tuple(sorted(best.items()))


def filling_order(seq: Sequence[Optional[int]], probs=None) -> list[tuple]:
    """Candidate fillings of the blank slots, most preferred first.

    ``probs`` has one row per position of ``seq``.  A blank marks a symbol the
    perception model probably got wrong, so each slot prefers the next most
    probable symbols and tries its argmax last: fillings are ordered by how
    many slots keep their argmax, then by joint probability.  Without
    ``probs`` the order is alphabetical.
    """
    blanks = [i for i, s in enumerate(seq) if s is None]
    combos = list(itertools.product(range(4), repeat=len(blanks)))
    if probs is not None and blanks:
        p = np.asarray(probs, dtype=float)[blanks]
        logp = np.log(np.clip(p, 1e-300, None))
        top = p.argmax(axis=1)

        def key(combo):
            kept = sum(int(c == t) for c, t in zip(combo, top))
            return kept, -sum(logp[j, c] for j, c in enumerate(combo)), combo
        combos.sort(key=key)
    return combos


def _fill(seq: Sequence[Optional[int]], combo: tuple) -> tuple:
    out = list(seq)
    it = iter(combo)
    for i, s in enumerate(out):
        if s is None:
            out[i] = next(it)
    return tuple(out)


def _commit_native(rules: OpRuleSet, completed: tuple, label: bool, allow_new_rules: bool):
    """Returns the rule extension (possibly empty) committing this example, or None."""
    v = _entails(rules, completed)
    if label:
        if v is True:
            return ()
        if v is None and allow_new_rules:
            return best_extension(rules, completed)
        return None
    # a negative commits only to a filling that parses and computes a different z
    return () if v is False and _parse(completed) is not None else None


def abduce(batch: Sequence[LabeledSeq], base_rules: OpRuleSet = OpRuleSet(),
           preferences: Optional[Sequence] = None, allow_new_rules: bool = True,
           engine: str = "native") -> AbductionResult:
    """Greedy consistency-maximising abduction over a batch.

    Examples are processed in order with a growing rule set.  A positive
    example commits the first filling (in preference order) for which some
    rule extension makes it true; a negative example commits the first filling
    it makes false, without adding rules.  After the pass, negatives left
    inconsistent are re-checked against the final rule set.
    """
    orders, fallbacks = [], []
    for i, ex in enumerate(batch):
        probs = None if preferences is None else preferences[i]
        orders.append(filling_order(ex.seq, probs))
        fallbacks.append(max_prob_filling(ex.seq, probs))
    return abduce_ordered(batch, orders, base_rules, allow_new_rules, engine, fallbacks)


def max_prob_filling(seq: Sequence[Optional[int]], probs=None) -> tuple:
    """Per-slot argmax filling (all zeros, i.e. symbol 0, without probabilities)."""
    blanks = [i for i, s in enumerate(seq) if s is None]
    if probs is None:
        return (0,) * len(blanks)
    p = np.asarray(probs, dtype=float)
    return tuple(int(p[i].argmax()) for i in blanks)


def abduce_ordered(batch: Sequence[LabeledSeq], orders: Sequence[list],
                   base_rules: OpRuleSet = OpRuleSet(), allow_new_rules: bool = True,
                   engine: str = "native", fallbacks: Optional[Sequence] = None) -> AbductionResult:
    """``abduce`` with the filling order of every example given explicitly.

    Examples left inconsistent keep their ``fallbacks`` filling (default: the
    first in order).
    """
    commit = _commit_native if engine == "native" else _commit_sld
    rules = base_rules
    completed: list = []
    mask: list = []
    for ex, order in zip(batch, orders):
        chosen = None
        for combo in order:
            cand = _fill(ex.seq, combo)
            ext = commit(rules, cand, bool(ex.label), allow_new_rules)
            if ext is not None:
                if ext:
                    rules = rules.extend(dict(ext))
                chosen = cand
                break
        if chosen is None:
            completed.append(_fill(ex.seq, order[0] if fallbacks is None else fallbacks[len(mask)]))
            mask.append(False)
        else:
            completed.append(chosen)
            mask.append(True)
    for i, ex in enumerate(batch):
        if mask[i] or ex.label:
            continue
        for combo in orders[i]:
            cand = _fill(ex.seq, combo)
            if commit(rules, cand, False, False) is not None:
                completed[i] = cand
                mask[i] = True
                break
    return AbductionResult(rules, completed, mask)


# --------------------------------------------------------------------------
# the same domain theory as a logic program, for the SLD route

DOMAIN_PROGRAM = r"""
% eq --> digits, [+], digits, [=], digits   (segments must be maximal digit runs)
eq(E, X, Y, Z) :- seg(E, X, ['+'|R1]), seg(R1, Y, ['='|R2]), seg(R2, Z, []),
                  number(X), number(Y), number(Z).
seg([D|T], [D|Ds], R) :- digit(D), seg_tail(T, Ds, R).
seg_tail([], [], []).
seg_tail([O|T], [], [O|T]) :- operator(O).
seg_tail([D|T], [D|Ds], R) :- digit(D), seg_tail(T, Ds, R).
number([0]).
number([1|_]).
digit(0).
digit(1).
operator('+').
operator('=').

% bitwise calculator parameterised by abduced my_op/3 rules
calc(X, Y, Z) :- rev(X, RX), rev(Y, RY), pad(RX, RY, PX, PY), add(PX, PY, 0, RZ),
                 rev(RZ, Z0), strip(Z0, Z).
rev(L, R) :- rev(L, [], R).
rev([], A, A).
rev([H|T], A, R) :- rev(T, [H|A], R).
pad([], [], [], []).
pad([A|As], [], [A|Ps], [0|Qs]) :- pad(As, [], Ps, Qs).
pad([], [B|Bs], [0|Ps], [B|Qs]) :- pad([], Bs, Ps, Qs).
pad([A|As], [B|Bs], [A|Ps], [B|Qs]) :- pad(As, Bs, Ps, Qs).
add([], [], 0, []).
add([], [], 1, [1]).
add([A|As], [B|Bs], C, [D|Ds]) :- col(A, B, C, D, C2), add(As, Bs, C2, Ds).
col(A, B, 0, D, C) :- my_op(A, B, L), split(L, D, C).
col(A, B, 1, D2, C) :- my_op(A, B, L), split(L, D1, C1), my_op(D1, 1, L2),
                       split(L2, D2, C2), csum(C1, C2, C).
split([D], D, 0).
split([H, D], D, 1).
csum(0, 0, 0).
csum(0, 1, 1).
csum(1, 0, 1).
strip([0, H|T], Z) :- strip([H|T], Z).
strip([1|T], [1|T]).
strip([0], [0]).

differ([], [_|_]).
differ([_|_], []).
differ([A|_], [B|_]) :- neq(A, B).
differ([A|T1], [A|T2]) :- differ(T1, T2).
neq(0, 1).
neq(1, 0).
"""

_RESULT_TERMS = tuple(make_list([Const(d) for d in r]) for r in RESULTS)
_IC = "false :- my_op(A, B, R1), my_op(A, B, R2), rneq(R1, R2).\n"


def _rneq_facts() -> str:
    lines = []
    for r1, r2 in itertools.permutations(RESULTS, 2):
        lines.append(f"rneq([{','.join(map(str, r1))}], [{','.join(map(str, r2))}]).")
    return "\n".join(lines)


@functools.lru_cache(maxsize=None)
def domain_theory() -> logic.Theory:
    """Equation KB with ``my_op/3`` abducible and the functional-rule IC."""
    return logic.Theory.from_text(
        DOMAIN_PROGRAM + _rneq_facts() + "\n" + _IC,
        abducibles=[("my_op", 3)],
        universe=(Const(0), Const(1)),
        arg_universe={("my_op", 3, 2): _RESULT_TERMS},
    )


@functools.lru_cache(maxsize=None)
def _fixed_theory(rules: OpRuleSet) -> logic.Theory:
    """Domain theory with ``my_op`` defined by facts (no abduction)."""
    facts = "\n".join(r + "." for r in rules.to_text().splitlines())
    return logic.Theory.from_text(DOMAIN_PROGRAM + facts, abducibles=[])


_SYM_TERMS = (Const(0), Const(1), Const("+"), Const("="))


def _seq_term(seq: Sequence[Optional[int]]):
    vars_ = []
    items = []
    for i, s in enumerate(seq):
        if s is None:
            v = Var(f"B{i}")
            vars_.append(v)
            items.append(v)
        else:
            items.append(_SYM_TERMS[s])
    return make_list(items), vars_


def _rule_atoms(rules: OpRuleSet) -> frozenset:
    return frozenset(
        Compound("my_op", (Const(a), Const(b), make_list([Const(d) for d in r])))
        for (a, b), r in rules.items)


def _atom_rule(a: Compound) -> tuple:
    pair = (a.args[0].value, a.args[1].value)
    return pair, tuple(t.value for t in list_items(a.args[2]))


def _commit_sld(rules: OpRuleSet, completed: tuple, label: bool, allow_new_rules: bool):
    term, _ = _seq_term(completed)
    X, Y, Z, Z2 = Var("X"), Var("Y"), Var("Z"), Var("Z2")
    if label:
        theory = domain_theory()
        base = _rule_atoms(rules)
        goals = [Compound("eq", (term, X, Y, Z)), Compound("calc", (X, Y, Z))]
        exts = []
        for ans in logic.solve(theory, goals, base_delta=base):
            ext = dict(_atom_rule(a) for a in ans.delta - base)
            if ext and not allow_new_rules:
                continue
            exts.append(ext)
        if not exts:
            return None
        return tuple(sorted(min(exts, key=_extension_key).items()))
    theory = _fixed_theory(rules)
    parses = any(True for _ in logic.solve(theory, [Compound("eq", (term, X, Y, Z))]))
    if not parses:
        return None  # a negative commits only to a parseable filling
    goals = [Compound("eq", (term, X, Y, Z)), Compound("calc", (X, Y, Z2)),
             Compound("differ", (Z, Z2))]
    for _ in logic.solve(theory, goals):
        return ()
    return None


def sld_fillings(seq: Sequence[Optional[int]]) -> list[tuple]:
    """Blank fillings that parse, enumerated by SLD resolution over ``eq/4``."""
    term, vars_ = _seq_term(seq)
    X, Y, Z = Var("X"), Var("Y"), Var("Z")
    out = []
    for ans in logic.solve(domain_theory(), [Compound("eq", (term, X, Y, Z))]):
        out.append(tuple(_SYM_TERMS.index(ans.binding[v]) for v in vars_))
    return out
