"""Quantifier-free situation formulas.

The language has relation atoms over object references, literals, variables
(written ``?name``) and function applications; connectives are ``and`` / ``or``
plus atom-level ``not``. ``and`` binds tighter than ``or``, and negation of a
compound is rejected at parse time. A Task pairs a precondition formula with an
effect formula; applying the effect changes world state, it is not implication.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Iterator, Union

from .errors import (
    ArityMismatch,
    DisjunctiveEffect,
    DomainTooLarge,
    FormulaSyntaxError,
    MalformedFormula,
    UnboundVariable,
    UnknownFunction,
    UnknownObject,
    UnknownRelation,
)

if TYPE_CHECKING:
    from .ontology import Ontology, WorldMap

# --- abstract syntax ---------------------------------------------------------

Value = Union[str, int, float, bool]


@dataclass(frozen=True)
class Variable:
    name: str


@dataclass(frozen=True)
class ObjectRef:
    """A bare identifier: an object id, or a symbol in attribute-valued positions."""

    object_id: str


@dataclass(frozen=True)
class Literal:
    value: Value


@dataclass(frozen=True)
class FunctionApp:
    name: str
    args: tuple["Term", ...]


Term = Union[Variable, ObjectRef, Literal, FunctionApp]


@dataclass(frozen=True)
class Atom:
    relation: str
    args: tuple[Term, ...]
    negated: bool = False


@dataclass(frozen=True)
class And:
    parts: tuple["Formula", ...]


@dataclass(frozen=True)
class Or:
    parts: tuple["Formula", ...]


@dataclass(frozen=True)
class TrueFormula:
    pass


Formula = Union[Atom, And, Or, TrueFormula]

TRUE = TrueFormula()

# Binding: variable name -> object id or literal value.
Binding = dict[str, Value]


@dataclass(frozen=True)
class Task:
    """Intention to change a local state: precondition formula -> effect formula."""

    precondition: Formula
    effect: Formula


# --- concrete syntax: tokenizer + recursive descent parser -------------------

_TOKEN_RE = re.compile(
    r"""
      (?P<ws>\s+)
    | (?P<var>\?[A-Za-z_][A-Za-z0-9_]*)
    | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
    | (?P<number>-?\d+(?:\.\d+)?)
    | (?P<string>"(?:[^"\\]|\\.)*")
    | (?P<punct>[(),])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    pos: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise FormulaSyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup or ""
        if kind != "ws":
            tokens.append(_Token(kind, m.group(), pos))
        pos = m.end()
    tokens.append(_Token("eof", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    @property
    def cur(self) -> _Token:
        return self.tokens[self.i]

    def advance(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, text: str) -> _Token:
        if self.cur.text != text:
            raise FormulaSyntaxError(f"expected {text!r}, found {self.cur.text!r}", self.cur.pos)
        return self.advance()

    def parse_formula(self) -> Formula:
        parts = [self.parse_conjunction()]
        while self.cur.text == "or":
            self.advance()
            parts.append(self.parse_conjunction())
        return parts[0] if len(parts) == 1 else Or(tuple(parts))

    def parse_conjunction(self) -> Formula:
        parts = [self.parse_unit()]
        while self.cur.text == "and":
            self.advance()
            parts.append(self.parse_unit())
        return parts[0] if len(parts) == 1 else And(tuple(parts))

    def parse_unit(self) -> Formula:
        tok = self.cur
        if tok.text == "true":
            self.advance()
            return TRUE
        if tok.text == "not":
            self.advance()
            if self.cur.text == "(":
                raise FormulaSyntaxError("negation applies to atoms only", self.cur.pos)
            atom = self.parse_atom()
            return Atom(atom.relation, atom.args, negated=True)
        if tok.text == "(":
            self.advance()
            inner = self.parse_formula()
            self.expect(")")
            return inner
        return self.parse_atom()

    def parse_atom(self) -> Atom:
        tok = self.cur
        if tok.kind != "ident":
            raise FormulaSyntaxError(f"expected relation name, found {tok.text!r}", tok.pos)
        self.advance()
        self.expect("(")
        args = [self.parse_term()]
        while self.cur.text == ",":
            self.advance()
            args.append(self.parse_term())
        self.expect(")")
        return Atom(tok.text, tuple(args))

    def parse_term(self) -> Term:
        tok = self.cur
        if tok.kind == "var":
            self.advance()
            return Variable(tok.text[1:])
        if tok.kind == "number":
            self.advance()
            return Literal(float(tok.text) if "." in tok.text else int(tok.text))
        if tok.kind == "string":
            self.advance()
            return Literal(tok.text[1:-1].replace('\\"', '"').replace("\\\\", "\\"))
        if tok.kind == "ident":
            self.advance()
            if self.cur.text == "(":
                self.advance()
                args = [self.parse_term()]
                while self.cur.text == ",":
                    self.advance()
                    args.append(self.parse_term())
                self.expect(")")
                return FunctionApp(tok.text, tuple(args))
            return ObjectRef(tok.text)
        raise FormulaSyntaxError(f"expected term, found {tok.text!r}", tok.pos)


def parse(text: str) -> Formula:
    """Parse concrete syntax into an AST. Raises FormulaSyntaxError with position."""
    if not text.strip():
        raise FormulaSyntaxError("empty formula", 0)
    parser = _Parser(text)
    f = parser.parse_formula()
    if parser.cur.kind != "eof":
        raise FormulaSyntaxError(f"trailing input {parser.cur.text!r}", parser.cur.pos)
    return f


def parse_task(precondition: str, effect: str) -> Task:
    return Task(parse(precondition), parse(effect))


# --- printer ------------------------------------------------------------------


def print_term(term: Term) -> str:
    if isinstance(term, Variable):
        return f"?{term.name}"
    if isinstance(term, ObjectRef):
        return term.object_id
    if isinstance(term, Literal):
        if isinstance(term.value, str):
            escaped = term.value.replace("\\", "\\\\").replace('"', '\\"')
            return f'"{escaped}"'
        return repr(term.value)
    return f"{term.name}({', '.join(print_term(a) for a in term.args)})"


def print_formula(f: Formula) -> str:
    """Canonical concrete syntax: single spaces, minimal parentheses."""
    if isinstance(f, TrueFormula):
        return "true"
    if isinstance(f, Atom):
        body = f"{f.relation}({', '.join(print_term(a) for a in f.args)})"
        return f"not {body}" if f.negated else body
    if isinstance(f, And):
        rendered = []
        for part in f.parts:
            text = print_formula(part)
            if isinstance(part, (Or, And)):
                text = f"({text})"
            rendered.append(text)
        return " and ".join(rendered)
    rendered = []
    for part in f.parts:
        text = print_formula(part)
        if isinstance(part, Or):
            text = f"({text})"
        rendered.append(text)
    return " or ".join(rendered)


# --- structural helpers --------------------------------------------------------


def term_variables(term: Term) -> Iterator[str]:
    if isinstance(term, Variable):
        yield term.name
    elif isinstance(term, FunctionApp):
        for a in term.args:
            yield from term_variables(a)


def free_variables(f: Formula) -> set[str]:
    if isinstance(f, TrueFormula):
        return set()
    if isinstance(f, Atom):
        out: set[str] = set()
        for a in f.args:
            out.update(term_variables(a))
        return out
    out = set()
    for part in f.parts:
        out |= free_variables(part)
    return out


def is_ground(f: Formula) -> bool:
    return not free_variables(f)


def atoms_of(f: Formula) -> Iterator[Atom]:
    if isinstance(f, Atom):
        yield f
    elif isinstance(f, (And, Or)):
        for part in f.parts:
            yield from atoms_of(part)


def conjuncts(f: Formula) -> list[Atom]:
    """The atom list of a conjunctive formula; TRUE gives []. Rejects disjunction."""
    if isinstance(f, TrueFormula):
        return []
    if isinstance(f, Atom):
        return [f]
    if isinstance(f, And):
        out: list[Atom] = []
        for part in f.parts:
            out.extend(conjuncts(part))
        return out
    raise DisjunctiveEffect(f"not a conjunction: {print_formula(f)}")


def mentioned_object_ids(f: Formula) -> set[str]:
    """Every bare identifier appearing in the formula's object-valued style args."""

    def walk_term(term: Term) -> Iterator[str]:
        if isinstance(term, ObjectRef):
            yield term.object_id
        elif isinstance(term, FunctionApp):
            for a in term.args:
                yield from walk_term(a)

    out: set[str] = set()
    for atom in atoms_of(f):
        for arg in atom.args:
            out.update(walk_term(arg))
    return out


# --- validation against an ontology -------------------------------------------


def validate_formula(f: Formula, ontology: "Ontology") -> None:
    """Check relation names, arities, argument kinds, and function names.

    Variables are only admitted in object-valued positions, so that bindings
    always range over object ids.
    """
    for atom in atoms_of(f):
        rel = ontology.relations.get(atom.relation)
        if rel is None:
            raise UnknownRelation(atom.relation)
        if len(atom.args) != rel.arity:
            raise ArityMismatch(
                f"{atom.relation} expects {rel.arity} arguments, got {len(atom.args)}"
            )
        for kind, arg in zip(rel.argument_kinds, atom.args):
            if isinstance(arg, Variable) and kind != "object":
                raise MalformedFormula(
                    f"variable ?{arg.name} in attribute-valued position of {atom.relation}"
                )
            if isinstance(arg, FunctionApp):
                _validate_function(arg, ontology)


def _validate_function(app: FunctionApp, ontology: "Ontology") -> None:
    if app.name not in ontology.functions:
        raise UnknownFunction(app.name)
    for a in app.args:
        if isinstance(a, FunctionApp):
            _validate_function(a, ontology)


def validate_effect(f: Formula, ontology: "Ontology") -> None:
    """Effects must be ground-able conjunctions whose atoms have update semantics."""
    validate_formula(f, ontology)
    for atom in conjuncts(f):
        rel = ontology.relations[atom.relation]
        if rel.semantics == "computed":
            if not rel.assignable:
                raise MalformedFormula(
                    f"computed relation {atom.relation} cannot appear in an effect"
                )
            if atom.negated:
                raise MalformedFormula(
                    f"negated assignment {atom.relation} has no update semantics"
                )


def validate_task(task: Task, ontology: "Ontology") -> None:
    validate_formula(task.precondition, ontology)
    validate_formula(task.effect, ontology)


# --- substitution ---------------------------------------------------------------


def _bind_value(value: Value) -> Term:
    return ObjectRef(value) if isinstance(value, str) else Literal(value)


def substitute_term(term: Term, binding: Binding) -> Term:
    if isinstance(term, Variable):
        if term.name in binding:
            return _bind_value(binding[term.name])
        return term
    if isinstance(term, FunctionApp):
        return FunctionApp(term.name, tuple(substitute_term(a, binding) for a in term.args))
    return term


def substitute(f: Formula, binding: Binding) -> Formula:
    """Replace bound variables by object refs / literals; unbound ones stay."""
    if isinstance(f, TrueFormula):
        return f
    if isinstance(f, Atom):
        return Atom(f.relation, tuple(substitute_term(a, binding) for a in f.args), f.negated)
    parts = tuple(substitute(p, binding) for p in f.parts)
    return And(parts) if isinstance(f, And) else Or(parts)


def substitute_task(task: Task, binding: Binding) -> Task:
    return Task(substitute(task.precondition, binding), substitute(task.effect, binding))


# --- evaluation ------------------------------------------------------------------


def _eval_function(app: FunctionApp, world: "WorldMap", binding: Binding) -> Value | None:
    if app.name != "attr":
        raise UnknownFunction(f"{app.name} is not evaluable in state formulas")
    if len(app.args) != 2:
        raise ArityMismatch("attr(object, attributeName) expects 2 arguments")
    obj_id = _resolve_term(app.args[0], world, binding, "object")
    name = _resolve_term(app.args[1], world, binding, "attribute")
    obj = world.objects.get(obj_id)  # type: ignore[arg-type]
    if obj is None:
        raise UnknownObject(str(obj_id))
    return obj.attribute_values.get(str(name))


def _resolve_term(term: Term, world: "WorldMap", binding: Binding, kind: str) -> Value | None:
    if isinstance(term, Variable):
        if term.name not in binding:
            raise UnboundVariable(term.name)
        value = binding[term.name]
    elif isinstance(term, ObjectRef):
        value = term.object_id
    elif isinstance(term, Literal):
        value = term.value
    else:
        return _eval_function(term, world, binding)
    if kind == "object":
        if not isinstance(value, str) or value not in world.objects:
            raise UnknownObject(str(value))
    return value


def _eval_atom(atom: Atom, world: "WorldMap", binding: Binding) -> bool:
    rel = world.ontology.relations.get(atom.relation)
    if rel is None:
        raise UnknownRelation(atom.relation)
    values = [
        _resolve_term(arg, world, binding, kind)
        for kind, arg in zip(rel.argument_kinds, atom.args)
    ]
    if rel.semantics == "computed":
        result = rel.procedure(world, values)  # type: ignore[misc]
    else:
        result = (atom.relation, tuple(values)) in world.relation_tuples
    return not result if atom.negated else result


def evaluate(f: Formula, world: "WorldMap", binding: Binding | None = None) -> bool:
    """Truth of a formula in a map under a binding; extensional atoms are
    closed-world (true iff the tuple is present)."""
    b = binding or {}
    if isinstance(f, TrueFormula):
        return True
    if isinstance(f, Atom):
        return _eval_atom(f, world, b)
    if isinstance(f, And):
        return all(evaluate(p, world, b) for p in f.parts)
    return any(evaluate(p, world, b) for p in f.parts)


def satisfying_bindings(f: Formula, world: "WorldMap") -> list[Binding]:
    """All bindings of the formula's free variables to map objects that make it
    true, ordered by variable name then object id."""
    names = sorted(free_variables(f))
    if not names:
        return [{}] if evaluate(f, world, {}) else []
    ids = sorted(world.objects)
    out: list[Binding] = []
    for combo in itertools.product(ids, repeat=len(names)):
        candidate = dict(zip(names, combo))
        if evaluate(f, world, candidate):
            out.append(candidate)
    return out


# --- small-domain entailment -------------------------------------------------------

_MAX_ENTAILMENT_ATOMS = 20


def _atom_key(atom: Atom) -> tuple:
    return (atom.relation, atom.args)


def _eval_under_valuation(f: Formula, valuation: dict[tuple, bool]) -> bool:
    if isinstance(f, TrueFormula):
        return True
    if isinstance(f, Atom):
        value = valuation[_atom_key(f)]
        return not value if f.negated else value
    if isinstance(f, And):
        return all(_eval_under_valuation(p, valuation) for p in f.parts)
    return any(_eval_under_valuation(p, valuation) for p in f.parts)


def entails(phi: Formula, psi: Formula, domain: Iterable[str] | None = None) -> bool:
    """True iff every valuation of the mentioned atoms satisfying phi satisfies psi.

    Both formulas must be ground. Atom truth values are enumerated directly,
    which coincides with enumerating maps over the given object universe for
    extensional relations.
    """
    if free_variables(phi) or free_variables(psi):
        raise UnboundVariable("entailment is defined for ground formulas only")
    if domain is not None:
        universe = set(domain)
        mentioned = mentioned_object_ids(phi) | mentioned_object_ids(psi)
        if not mentioned <= universe:
            raise UnknownObject(", ".join(sorted(mentioned - universe)))
    keys = sorted(
        {_atom_key(a) for a in atoms_of(phi)} | {_atom_key(a) for a in atoms_of(psi)},
        key=repr,
    )
    if len(keys) > _MAX_ENTAILMENT_ATOMS:
        raise DomainTooLarge(f"{len(keys)} distinct atoms exceed {_MAX_ENTAILMENT_ATOMS}")
    for bits in itertools.product((False, True), repeat=len(keys)):
        valuation = dict(zip(keys, bits))
        if _eval_under_valuation(phi, valuation) and not _eval_under_valuation(psi, valuation):
            return False
    return True


# --- syntactic matching -------------------------------------------------------------


def _ground_term_value(term: Term) -> Value | None:
    if isinstance(term, ObjectRef):
        return term.object_id
    if isinstance(term, Literal):
        return term.value
    return None


def unify_atom(pattern: Atom, target: Atom, binding: Binding) -> Binding | None:
    """Extend `binding` so that pattern becomes syntactically equal to the ground
    target atom; None if impossible. Function applications never unify."""
    if pattern.relation != target.relation or pattern.negated != target.negated:
        return None
    if len(pattern.args) != len(target.args):
        return None
    out = dict(binding)
    for p_arg, t_arg in zip(pattern.args, target.args):
        t_value = _ground_term_value(t_arg)
        if t_value is None:
            return None
        if isinstance(p_arg, Variable):
            if p_arg.name in out and out[p_arg.name] != t_value:
                return None
            out[p_arg.name] = t_value
        else:
            p_value = _ground_term_value(p_arg)
            if p_value is None or p_value != t_value:
                return None
    return out


def unify_conjunctions(pattern: Formula, target: Formula) -> Binding | None:
    """Position-wise unification of two conjunctive formulas (target ground)."""
    try:
        p_atoms = conjuncts(pattern)
        t_atoms = conjuncts(target)
    except DisjunctiveEffect:
        return None
    if len(p_atoms) != len(t_atoms):
        return None
    binding: Binding | None = {}
    for p, t in zip(p_atoms, t_atoms):
        binding = unify_atom(p, t, binding)  # type: ignore[arg-type]
        if binding is None:
            return None
    return binding
