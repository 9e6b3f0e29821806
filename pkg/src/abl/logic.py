"""A small abductive logic programming engine.

Terms, unification with occurs-check, depth-limited SLD resolution that
collects ground abducible atoms, and integrity-constraint checking.  A loader
reads Prolog-like clause text (``head :- b1, b2.``, ``fact.``, ``[a,b|T]``).
"""
from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Sequence, Union

__all__ = [
    "Var", "Const", "Compound", "Cons", "NIL", "Term", "Clause", "Theory",
    "AbductiveAnswer", "DepthExceeded", "ParseError", "FALSITY",
    "unify", "resolve", "is_ground", "variables", "make_list", "list_items",
    "solve", "check_ic", "parse_clauses", "parse_term", "parse_goals", "atom",
    "DEFAULT_DEPTH_LIMIT",
]

DEFAULT_DEPTH_LIMIT = 10_000


@dataclass(frozen=True)
class Var:
    name: str

    def __repr__(self) -> str:
        return self.name


@dataclass(frozen=True)
class Const:
    value: Union[str, int]

    def __repr__(self) -> str:
        return str(self.value)


@dataclass(frozen=True)
class Compound:
    functor: str
    args: tuple

    def __post_init__(self):
        if not self.functor:
            raise ValueError("functor names must be nonempty")

    def __repr__(self) -> str:
        if not self.args:
            return self.functor
        return f"{self.functor}({','.join(map(repr, self.args))})"

    @property
    def signature(self) -> tuple[str, int]:
        return self.functor, len(self.args)


@dataclass(frozen=True)
class Cons:
    head: "Term"
    tail: "Term"

    def __repr__(self) -> str:
        items, tail = [], self
        while isinstance(tail, Cons):
            items.append(repr(tail.head))
            tail = tail.tail
        inner = ",".join(items)
        if tail == NIL:
            return f"[{inner}]"
        return f"[{inner}|{tail!r}]"


NIL = Const("[]")
Term = Union[Var, Const, Compound, Cons]
Binding = Mapping[Var, Term]

FALSITY = "false"


def atom(name: str, *args: Term) -> Compound:
    return Compound(name, tuple(args))


def make_list(items: Iterable[Term], tail: Term = NIL) -> Term:
    out = tail
    for item in reversed(list(items)):
        out = Cons(item, out)
    return out


def list_items(term: Term) -> list[Term]:
    """Items of a proper list; raises ValueError for partial lists."""
    items = []
    while isinstance(term, Cons):
        items.append(term.head)
        term = term.tail
    if term != NIL:
        raise ValueError(f"not a proper list (tail {term!r})")
    return items


def _walk(t: Term, b: Binding) -> Term:
    while isinstance(t, Var) and t in b:
        t = b[t]
    return t


def resolve(t: Term, b: Binding) -> Term:
    """Apply a binding fully."""
    t = _walk(t, b)
    if isinstance(t, Compound):
        if not t.args:
            return t
        return Compound(t.functor, tuple(resolve(a, b) for a in t.args))
    if isinstance(t, Cons):
        return Cons(resolve(t.head, b), resolve(t.tail, b))
    return t


def variables(t: Term) -> list[Var]:
    """Variables of a term in first-occurrence order."""
    seen: dict[Var, None] = {}
    stack = [t]
    while stack:
        cur = stack.pop()
        if isinstance(cur, Var):
            seen.setdefault(cur)
        elif isinstance(cur, Compound):
            stack.extend(reversed(cur.args))
        elif isinstance(cur, Cons):
            stack.append(cur.tail)
            stack.append(cur.head)
    return list(seen)


def is_ground(t: Term) -> bool:
    return not variables(t)


def _occurs(v: Var, t: Term, b: Binding) -> bool:
    stack = [t]
    while stack:
        cur = _walk(stack.pop(), b)
        if cur == v:
            return True
        if isinstance(cur, Compound):
            stack.extend(cur.args)
        elif isinstance(cur, Cons):
            stack.append(cur.head)
            stack.append(cur.tail)
    return False


def unify(t1: Term, t2: Term, b: Binding | None = None, occurs_check: bool = True):
    """Most general unifier extending ``b``, or None when none exists."""
    out = dict(b) if b else {}
    stack = [(t1, t2)]
    while stack:
        a, c = stack.pop()
        a, c = _walk(a, out), _walk(c, out)
        if a == c:
            continue
        if isinstance(a, Var):
            if occurs_check and _occurs(a, c, out):
                return None
            out[a] = c
        elif isinstance(c, Var):
            if occurs_check and _occurs(c, a, out):
                return None
            out[c] = a
        elif isinstance(a, Compound) and isinstance(c, Compound):
            if a.functor != c.functor or len(a.args) != len(c.args):
                return None
            stack.extend(zip(a.args, c.args))
        elif isinstance(a, Cons) and isinstance(c, Cons):
            stack.append((a.tail, c.tail))
            stack.append((a.head, c.head))
        else:
            return None
    return out


@dataclass(frozen=True)
class Clause:
    head: Compound
    body: tuple = ()

    def __post_init__(self):
        if not isinstance(self.head, Compound):
            raise ValueError(f"clause head must be a compound term, got {self.head!r}")

    def __repr__(self) -> str:
        if not self.body:
            return f"{self.head!r}."
        return f"{self.head!r} :- {', '.join(map(repr, self.body))}."


@dataclass(frozen=True)
class Theory:
    """An abductive theory (KB, abducibles, ICs) plus a grounding universe.

    ``universe`` lists the constants used to ground non-ground abducible
    goals; ``arg_universe`` overrides it per (functor, arity, position).
    """

    kb: tuple
    abducibles: frozenset
    ics: tuple = ()
    universe: tuple = ()
    arg_universe: Mapping = field(default_factory=dict)

    def __post_init__(self):
        for c in self.kb:
            if c.head.signature in self.abducibles:
                raise ValueError(f"abducible {c.head.signature} has a defining clause")
        for ic in self.ics:
            if ic.head.functor != FALSITY:
                raise ValueError(f"integrity constraint head must be '{FALSITY}'")
        index: dict = {}
        for c in self.kb:
            index.setdefault(c.head.signature, []).append(c)
        object.__setattr__(self, "_index", index)

    @classmethod
    def from_text(cls, text: str, abducibles: Iterable[tuple[str, int]], **kw) -> "Theory":
        clauses = parse_clauses(text)
        kb = tuple(c for c in clauses if c.head.functor != FALSITY)
        ics = tuple(c for c in clauses if c.head.functor == FALSITY)
        return cls(kb=kb, abducibles=frozenset(abducibles), ics=ics, **kw)

    def clauses_for(self, sig: tuple[str, int]) -> list[Clause]:
        return self._index.get(sig, [])

    def candidates(self, sig: tuple[str, int], pos: int) -> tuple:
        return tuple(self.arg_universe.get((sig[0], sig[1], pos), self.universe))


@dataclass(frozen=True)
class AbductiveAnswer:
    binding: dict
    delta: frozenset


class DepthExceeded(Exception):
    """Raised when proof search was truncated by the depth limit."""

    def __init__(self, message: str = "search truncated by depth limit", answers: int = 0):
        super().__init__(message)
        self.answers = answers


class _Renamer:
    def __init__(self):
        self.counter = itertools.count()

    def rename(self, clause: Clause) -> tuple[Compound, tuple]:
        n = next(self.counter)
        mapping: dict[Var, Var] = {}

        def go(t):
            if isinstance(t, Var):
                if t not in mapping:
                    mapping[t] = Var(f"{t.name}#{n}")
                return mapping[t]
            if isinstance(t, Compound):
                return Compound(t.functor, tuple(go(a) for a in t.args)) if t.args else t
            if isinstance(t, Cons):
                return Cons(go(t.head), go(t.tail))
            return t

        return go(clause.head), tuple(go(g) for g in clause.body)


def _groundings(theory: Theory, goal: Compound, b: Binding) -> Iterator[Compound]:
    g = resolve(goal, b)
    free = variables(g)
    if not free:
        yield g
        return
    # candidates for each free variable: use the universe of its first argument slot
    slots = {}
    for pos, arg in enumerate(g.args):
        for v in variables(arg):
            slots.setdefault(v, theory.candidates(g.signature, pos))
    for combo in itertools.product(*(slots[v] for v in free)):
        yield resolve(g, dict(zip(free, combo)))


def _search(theory: Theory, goals: tuple, binding: dict, delta: frozenset,
            depth_limit: int, abduce: bool, renamer: _Renamer, state: dict):
    """Depth-first SLD search; yields (binding, delta). Sets state['truncated']."""
    stack = [(_to_chain(goals), binding, delta, 0)]
    while stack:
        chain, b, d, depth = stack.pop()
        if chain is None:
            yield b, d
            continue
        if depth >= depth_limit:
            state["truncated"] = True
            continue
        goal, rest = chain
        goal = _walk(goal, b)
        if not isinstance(goal, Compound):
            raise TypeError(f"goal must be a compound term, got {goal!r}")
        sig = goal.signature
        alts = []
        if sig in theory.abducibles:
            seen = set()
            for a in sorted(d, key=repr):
                if a.signature != sig:
                    continue
                nb = unify(goal, a, b)
                if nb is not None:
                    alts.append((rest, nb, d, depth + 1))
                    seen.add(resolve(goal, nb))
            if abduce:
                for g in _groundings(theory, goal, b):
                    if g in d or g in seen:
                        continue
                    nd = d | {g}
                    if not check_ic(theory, nd, depth_limit):
                        continue
                    nb = unify(goal, g, b)
                    alts.append((rest, nb, nd, depth + 1))
        else:
            for clause in theory.clauses_for(sig):
                head, body = renamer.rename(clause)
                nb = unify(goal, head, b)
                if nb is None:
                    continue
                chain2 = rest
                for g in reversed(body):
                    chain2 = (g, chain2)
                alts.append((chain2, nb, d, depth + 1))
        stack.extend(reversed(alts))


def _to_chain(goals: Sequence) -> tuple | None:
    chain = None
    for g in reversed(list(goals)):
        chain = (g, chain)
    return chain


def solve(theory: Theory, goals: Sequence[Compound], depth_limit: int = DEFAULT_DEPTH_LIMIT,
          base_delta: Iterable[Compound] = ()) -> Iterator[AbductiveAnswer]:
    """Yield abductive answers for ``goals`` in depth-first, clause order.

    Every answer's delta extends ``base_delta`` with ground abducibles and
    passes the integrity constraints.  Duplicate (binding, delta) answers are
    suppressed.  If any branch was cut by ``depth_limit`` the stream ends by
    raising DepthExceeded after all answers found have been yielded.
    """
    if depth_limit < 1:
        raise ValueError("depth_limit must be >= 1")
    base = frozenset(base_delta)
    for a in base:
        if not is_ground(a) or a.signature not in theory.abducibles:
            raise ValueError(f"base_delta atom {a!r} is not a ground abducible")
    qvars = []
    for g in goals:
        for v in variables(g):
            if v not in qvars:
                qvars.append(v)
    state = {"truncated": False}
    emitted = set()
    count = 0
    for b, d in _search(theory, tuple(goals), {}, base, depth_limit, True, _Renamer(), state):
        answer_binding = {v: resolve(v, b) for v in qvars if resolve(v, b) != v}
        key = (tuple(sorted((v.name, repr(t)) for v, t in answer_binding.items())), d)
        if key in emitted:
            continue
        emitted.add(key)
        count += 1
        yield AbductiveAnswer(answer_binding, d)
    if state["truncated"]:
        raise DepthExceeded(answers=count)


def check_ic(theory: Theory, delta: Iterable[Compound], depth_limit: int = DEFAULT_DEPTH_LIMIT) -> bool:
    """True iff no integrity-constraint body is provable from KB and delta."""
    d = frozenset(delta)
    for ic in theory.ics:
        state = {"truncated": False}
        renamer = _Renamer()
        _, body = renamer.rename(ic)
        for _ in _search(theory, body, {}, d, depth_limit, False, renamer, state):
            return False
        if state["truncated"]:
            raise DepthExceeded("integrity check truncated by depth limit")
    return True


# --------------------------------------------------------------------------
# clause text loader

class ParseError(ValueError):
    pass


_TOKEN = re.compile(r"""
    (?P<ws>\s+|%[^\n]*)
  | (?P<neck>:-)
  | (?P<int>-?\d+)
  | (?P<var>[A-Z_][A-Za-z0-9_]*)
  | (?P<name>[a-z][A-Za-z0-9_]*)
  | (?P<quoted>'[^']*')
  | (?P<punct>[()\[\],|])
  | (?P<end>\.(?=\s|$|%))
  | (?P<sym>[+\-*/<>=\\~^@#&$?!.]+)
""", re.VERBOSE)


def _tokenize(text: str) -> list[tuple[str, str]]:
    pos, out = 0, []
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise ParseError(f"unexpected character {text[pos]!r} at offset {pos}")
        pos = m.end()
        kind = m.lastgroup
        if kind == "ws":
            continue
        out.append((kind, m.group()))
    return out


class _Parser:
    def __init__(self, tokens):
        self.toks = tokens
        self.i = 0
        self.vars: dict[str, Var] = {}
        self.anon = itertools.count()

    def peek(self):
        return self.toks[self.i] if self.i < len(self.toks) else (None, None)

    def take(self, value=None):
        kind, tok = self.peek()
        if kind is None or (value is not None and tok != value):
            raise ParseError(f"expected {value!r}, got {tok!r}")
        self.i += 1
        return kind, tok

    def term(self) -> Term:
        kind, tok = self.take()
        if kind == "int":
            return Const(int(tok))
        if kind == "var":
            if tok == "_":
                return Var(f"_G{next(self.anon)}")
            return self.vars.setdefault(tok, Var(tok))
        if kind in ("name", "quoted", "sym"):
            name = tok[1:-1] if kind == "quoted" else tok
            if self.peek()[1] == "(":
                self.take("(")
                args = [self.term()]
                while self.peek()[1] == ",":
                    self.take(",")
                    args.append(self.term())
                self.take(")")
                return Compound(name, tuple(args))
            return Const(name)
        if tok == "[":
            if self.peek()[1] == "]":
                self.take("]")
                return NIL
            items = [self.term()]
            while self.peek()[1] == ",":
                self.take(",")
                items.append(self.term())
            tail = NIL
            if self.peek()[1] == "|":
                self.take("|")
                tail = self.term()
            self.take("]")
            return make_list(items, tail)
        raise ParseError(f"unexpected token {tok!r}")

    def goal(self) -> Compound:
        t = self.term()
        if isinstance(t, Const) and isinstance(t.value, str) and t != NIL:
            return Compound(t.value, ())
        if not isinstance(t, Compound):
            raise ParseError(f"goal must be an atom or compound, got {t!r}")
        return t

    def clause(self) -> Clause:
        self.vars = {}
        head = self.goal()
        body = []
        if self.peek()[0] == "neck":
            self.take()
            body.append(self.goal())
            while self.peek()[1] == ",":
                self.take(",")
                body.append(self.goal())
        self.take(".")
        return Clause(head, tuple(body))


def parse_clauses(text: str) -> list[Clause]:
    p = _Parser(_tokenize(text))
    out = []
    while p.peek()[0] is not None:
        out.append(p.clause())
    return out


def parse_term(text: str) -> Term:
    p = _Parser(_tokenize(text))
    t = p.term()
    if p.peek()[0] is not None:
        raise ParseError(f"trailing input after term: {p.peek()[1]!r}")
    return t


def parse_goals(text: str) -> list[Compound]:
    """Parse a comma-separated goal list (``a(X), b``); a trailing '.' is optional."""
    p = _Parser(_tokenize(text))
    goals = [p.goal()]
    while p.peek()[1] == ",":
        p.take(",")
        goals.append(p.goal())
    if p.peek()[1] == ".":
        p.take(".")
    if p.peek()[0] is not None:
        raise ParseError(f"trailing input: {p.peek()[1]!r}")
    return goals
