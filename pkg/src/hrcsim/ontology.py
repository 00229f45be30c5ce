"""Type tree, attribute/relation vocabularies, object instances, world maps.

The type hierarchy is a tree rooted at Object with a PhysicalObject and an
AbstractObject branch. Physical leaves are directly sensable things; abstract
types compose already-defined types. Only leaves can be instantiated. A world
map is an instance of the ontology: concrete objects plus extensional relation
tuples, closed-world.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Iterable

from . import formula as fm
from .errors import (
    DuplicateName,
    InvalidTypeDefinition,
    RangeNotSubsetOfParent,
    UnknownAttribute,
    UnknownObject,
    UnknownParent,
    UnknownType,
    UnresolvedSubobjectType,
)

ROOT = "Object"
PHYSICAL_BRANCH = "PhysicalObject"
ABSTRACT_BRANCH = "AbstractObject"

NumberRange = tuple[float, float]


@dataclass(frozen=True)
class AttributeDef:
    """A named measurable property. Units are tags compared for equality only."""

    name: str
    domain: str  # "number" | "enum" | "text" | "boolean"
    unit: str | None = None
    number_range: NumberRange | None = None
    allowed: frozenset[str] | None = None

    def __post_init__(self):
        if self.domain == "number" and self.number_range is not None:
            lo, hi = self.number_range
            if lo > hi:
                raise InvalidTypeDefinition(f"attribute {self.name}: empty range")


@dataclass(frozen=True)
class RelationDef:
    """Relation vocabulary entry.

    Extensional relations are decided by tuple membership in a map; computed
    relations carry a total decision procedure. `assignable` marks computed
    relations that may appear in effects as attribute assignments. `invertible`
    marks relations whose effects can be compensated by restoring prior truth.
    """

    name: str
    arity: int
    argument_kinds: tuple[str, ...]  # per position: "object" | "attribute"
    semantics: str = "extensional"  # | "computed"
    procedure: Callable[["WorldMap", list], bool] | None = None
    assignable: bool = False
    invertible: bool = True

    def __post_init__(self):
        if self.arity < 1 or len(self.argument_kinds) != self.arity:
            raise InvalidTypeDefinition(f"relation {self.name}: bad arity/kinds")
        if self.semantics == "computed" and self.procedure is None:
            raise InvalidTypeDefinition(f"relation {self.name}: missing procedure")


@dataclass(frozen=True)
class AttributeUse:
    """An attribute attached to a type, optionally tightened and/or optional."""

    name: str
    number_range: NumberRange | None = None
    allowed: frozenset[str] | None = None
    required: bool = True


@dataclass(frozen=True)
class SubobjectSpec:
    role: str
    type_name: str
    min_count: int = 1
    exact: bool = False

    def __post_init__(self):
        if self.min_count < 1:
            raise InvalidTypeDefinition(f"sub-object {self.role}: multiplicity must be >= 1")


@dataclass(frozen=True)
class TypeDef:
    name: str
    parent: str | None
    kind: str  # "physical-leaf" | "abstract-leaf" | "intermediate"
    attributes: tuple[AttributeUse, ...] = ()
    subobjects: tuple[SubobjectSpec, ...] = ()
    constraints: tuple[fm.Formula, ...] = ()  # free variable ?self = the instance


@dataclass(frozen=True)
class Ontology:
    types: dict[str, TypeDef]
    attributes: dict[str, AttributeDef]
    relations: dict[str, RelationDef]
    functions: frozenset[str] = frozenset({"attr", "action", "range"})

    def parent_chain(self, name: str) -> list[str]:
        if name not in self.types:
            raise UnknownType(name)
        chain = [name]
        while True:
            parent = self.types[chain[-1]].parent
            if parent is None:
                return chain
            chain.append(parent)

    def effective_attributes(self, name: str) -> dict[str, AttributeUse]:
        """Attribute uses of a type including inherited ones; child tightenings win."""
        merged: dict[str, AttributeUse] = {}
        for type_name in reversed(self.parent_chain(name)):
            for use in self.types[type_name].attributes:
                merged[use.name] = use
        return merged

    def effective_subobjects(self, name: str) -> dict[str, SubobjectSpec]:
        merged: dict[str, SubobjectSpec] = {}
        for type_name in reversed(self.parent_chain(name)):
            for spec in self.types[type_name].subobjects:
                merged[spec.role] = spec
        return merged

    def effective_constraints(self, name: str) -> list[fm.Formula]:
        out: list[fm.Formula] = []
        for type_name in reversed(self.parent_chain(name)):
            out.extend(self.types[type_name].constraints)
        return out


def is_subtype(ontology: Ontology, a: str, b: str) -> bool:
    """True iff b lies on a's parent chain (reflexive)."""
    if b not in ontology.types:
        raise UnknownType(b)
    return b in ontology.parent_chain(a)


def _effective_range(
    ontology: Ontology, use: AttributeUse
) -> tuple[NumberRange | None, frozenset[str] | None]:
    base = ontology.attributes[use.name]
    return (
        use.number_range if use.number_range is not None else base.number_range,
        use.allowed if use.allowed is not None else base.allowed,
    )


def register_attribute(ontology: Ontology, attr: AttributeDef) -> Ontology:
    if attr.name in ontology.attributes:
        raise DuplicateName(f"attribute {attr.name}")
    attrs = dict(ontology.attributes)
    attrs[attr.name] = attr
    return replace(ontology, attributes=attrs)


def register_relation(ontology: Ontology, rel: RelationDef) -> Ontology:
    if rel.name in ontology.relations:
        raise DuplicateName(f"relation {rel.name}")
    rels = dict(ontology.relations)
    rels[rel.name] = rel
    return replace(ontology, relations=rels)


def register_type(ontology: Ontology, type_def: TypeDef) -> Ontology:
    """Add a type under an existing parent, checking inheritance rules."""
    if type_def.name in ontology.types:
        raise DuplicateName(type_def.name)
    if type_def.parent is None or type_def.parent not in ontology.types:
        raise UnknownParent(f"{type_def.name}: parent {type_def.parent!r} not in ontology")
    inherited = ontology.effective_attributes(type_def.parent)
    for use in type_def.attributes:
        if use.name not in ontology.attributes:
            raise UnknownAttribute(use.name)
        if use.name in inherited:
            parent_range, parent_allowed = _effective_range(ontology, inherited[use.name])
            if use.number_range is not None and parent_range is not None:
                lo, hi = use.number_range
                if lo < parent_range[0] or hi > parent_range[1]:
                    raise RangeNotSubsetOfParent(f"{type_def.name}.{use.name}")
            if use.allowed is not None and parent_allowed is not None:
                if not use.allowed <= parent_allowed:
                    raise RangeNotSubsetOfParent(f"{type_def.name}.{use.name}")
    for spec in type_def.subobjects:
        if spec.type_name not in ontology.types:
            raise UnresolvedSubobjectType(f"{type_def.name}.{spec.role}: {spec.type_name}")
        if type_def.kind == "physical-leaf":
            if not is_subtype(ontology, spec.type_name, PHYSICAL_BRANCH):
                raise InvalidTypeDefinition(
                    f"physical type {type_def.name} cannot contain abstract {spec.type_name}"
                )
    types = dict(ontology.types)
    types[type_def.name] = type_def
    return replace(ontology, types=types)


# --- built-in upper ontology ---------------------------------------------------


def _attr_compare(op: Callable[[float, float], bool]) -> Callable[["WorldMap", list], bool]:
    def proc(world: "WorldMap", values: list) -> bool:
        obj_id, attr_name, threshold = values
        obj = world.objects.get(obj_id)
        if obj is None:
            raise UnknownObject(str(obj_id))
        current = obj.attribute_values.get(str(attr_name))
        if current is None or isinstance(current, str) or isinstance(threshold, str):
            return False
        return op(float(current), float(threshold))

    return proc


def _attr_equals(world: "WorldMap", values: list) -> bool:
    obj_id, attr_name, wanted = values
    obj = world.objects.get(obj_id)
    if obj is None:
        raise UnknownObject(str(obj_id))
    current = obj.attribute_values.get(str(attr_name))
    return current is not None and current == wanted


_BUILTIN_ATTRIBUTES = [
    AttributeDef("bodyTemperature", "number", unit="C", number_range=(30.0, 45.0)),
    AttributeDef("heartRate", "number", unit="bpm", number_range=(20.0, 250.0)),
    AttributeDef("bloodPressure", "number", unit="mmHg", number_range=(40.0, 250.0)),
    AttributeDef("ToolList", "text"),
    AttributeDef("PreferredEnvironment", "text"),
    AttributeDef("temperature", "number", unit="C", number_range=(-50.0, 100.0)),
    AttributeDef("humidity", "number", unit="pct", number_range=(0.0, 100.0)),
    AttributeDef("lightIntensity", "number", unit="lux", number_range=(0.0, 200000.0)),
    AttributeDef("coPollution", "number", unit="ppm", number_range=(0.0, 1000.0)),
    AttributeDef("color", "text"),
    AttributeDef("weight", "number", unit="kg", number_range=(0.0, 100000.0)),
    AttributeDef("volume", "number", unit="m3", number_range=(0.0, 100000.0)),
    AttributeDef("position", "text"),
]

_BUILTIN_RELATIONS = [
    RelationDef("isIn", 2, ("object", "object")),
    RelationDef("isAdjacentTo", 2, ("object", "object")),
    RelationDef(
        "attrEq",
        3,
        ("object", "attribute", "attribute"),
        semantics="computed",
        procedure=_attr_equals,
        assignable=True,
    ),
    RelationDef(
        "attrLt",
        3,
        ("object", "attribute", "attribute"),
        semantics="computed",
        procedure=_attr_compare(lambda a, b: a < b),
    ),
    RelationDef(
        "attrGt",
        3,
        ("object", "attribute", "attribute"),
        semantics="computed",
        procedure=_attr_compare(lambda a, b: a > b),
    ),
]

_SENSED = ("temperature", "humidity", "lightIntensity", "coPollution")


def builtin_ontology() -> Ontology:
    """The built-in upper ontology: the Object tree with the physical branch
    (device and living elements) and the abstract branch (devices and humans)."""
    ont = Ontology(
        types={ROOT: TypeDef(ROOT, None, "intermediate")},
        attributes={},
        relations={},
    )
    for attr in _BUILTIN_ATTRIBUTES:
        ont = register_attribute(ont, attr)
    for rel in _BUILTIN_RELATIONS:
        ont = register_relation(ont, rel)

    tree: list[TypeDef] = [
        TypeDef(PHYSICAL_BRANCH, ROOT, "intermediate"),
        TypeDef("NonlivingElement", PHYSICAL_BRANCH, "intermediate"),
        TypeDef("DeviceElement", "NonlivingElement", "intermediate"),
        TypeDef("RobotElement", "DeviceElement", "physical-leaf"),
        TypeDef("ToolElement", "DeviceElement", "physical-leaf"),
        TypeDef(
            "SimpleSensor",
            "DeviceElement",
            "physical-leaf",
            attributes=tuple(AttributeUse(name, required=False) for name in _SENSED),
        ),
        TypeDef("LightingElement", "DeviceElement", "physical-leaf"),
        TypeDef("LivingElement", PHYSICAL_BRANCH, "intermediate"),
        TypeDef("BodyElement", "LivingElement", "intermediate"),
        TypeDef(
            "HumanBody",
            "BodyElement",
            "physical-leaf",
            attributes=(
                AttributeUse("bodyTemperature"),
                AttributeUse("heartRate"),
                AttributeUse("bloodPressure"),
            ),
        ),
        TypeDef(ABSTRACT_BRANCH, ROOT, "intermediate"),
        TypeDef("Nonliving", ABSTRACT_BRANCH, "intermediate"),
        TypeDef("Device", "Nonliving", "intermediate"),
        TypeDef("Robot", "Device", "intermediate"),
        TypeDef("MobileRobot", "Robot", "abstract-leaf"),
        TypeDef("RobotWithArm", "Robot", "abstract-leaf"),
        TypeDef("Platform", "Robot", "abstract-leaf"),
        TypeDef("RobotWithContainer", "Robot", "abstract-leaf"),
        TypeDef("Sensor", "Device", "abstract-leaf"),
        TypeDef("Living", ABSTRACT_BRANCH, "intermediate"),
        TypeDef(
            "Human",
            "Living",
            "abstract-leaf",
            attributes=(AttributeUse("ToolList"), AttributeUse("PreferredEnvironment")),
            subobjects=(SubobjectSpec("Body", "HumanBody", 1, exact=True),),
        ),
    ]
    for type_def in tree:
        ont = register_type(ont, type_def)
    return ont


# --- instances and maps -----------------------------------------------------------


@dataclass(frozen=True)
class ObjectInstance:
    id: str
    type_name: str
    attribute_values: dict[str, fm.Value] = field(default_factory=dict)
    subobjects: dict[str, tuple[str, ...]] = field(default_factory=dict)  # role -> ids


RelationTuple = tuple[str, tuple]


@dataclass(frozen=True)
class WorldMap:
    """A concrete environment: objects plus extensional relation tuples.

    Values are immutable; every mutation helper returns a new map with the
    version counter bumped, so publication order is totally ordered.
    """

    ontology: Ontology
    objects: dict[str, ObjectInstance]
    relation_tuples: frozenset[RelationTuple]
    version: int = 0

    def has_tuple(self, relation: str, args: Iterable) -> bool:
        return (relation, tuple(args)) in self.relation_tuples

    def with_changes(
        self,
        add_tuples: Iterable[RelationTuple] = (),
        remove_tuples: Iterable[RelationTuple] = (),
        set_attributes: Iterable[tuple[str, str, fm.Value]] = (),
    ) -> "WorldMap":
        tuples = set(self.relation_tuples)
        tuples.difference_update(remove_tuples)
        tuples.update(add_tuples)
        objects = self.objects
        attr_sets = list(set_attributes)
        if attr_sets:
            objects = dict(objects)
            for obj_id, attr_name, value in attr_sets:
                obj = objects.get(obj_id)
                if obj is None:
                    raise UnknownObject(obj_id)
                values = dict(obj.attribute_values)
                values[attr_name] = value
                objects[obj_id] = replace(obj, attribute_values=values)
        return WorldMap(self.ontology, objects, frozenset(tuples), self.version + 1)

    def signature(self) -> tuple:
        """Hashable identity of the state content (tuples + attribute values)."""
        attrs = tuple(
            (obj_id, name, obj.attribute_values[name])
            for obj_id, obj in sorted(self.objects.items())
            for name in sorted(obj.attribute_values)
        )
        return (self.relation_tuples, attrs)


def build_map(
    ontology: Ontology,
    objects: Iterable[ObjectInstance],
    tuples: Iterable[RelationTuple] = (),
) -> WorldMap:
    by_id: dict[str, ObjectInstance] = {}
    for obj in objects:
        if obj.id in by_id:
            raise DuplicateName(f"object {obj.id}")
        by_id[obj.id] = obj
    return WorldMap(ontology, by_id, frozenset(tuples), version=0)


# --- instance validation -----------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    object_id: str
    rule: str
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, object_id: str, rule: str, message: str) -> None:
        self.violations.append(Violation(object_id, rule, message))


def _check_value(
    report: ValidationReport,
    ontology: Ontology,
    obj: ObjectInstance,
    use: AttributeUse,
    value: fm.Value,
) -> None:
    base = ontology.attributes[use.name]
    number_range, allowed = _effective_range(ontology, use)
    if base.domain == "number":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            report.add(obj.id, "attribute-type", f"{use.name}: expected a number")
        elif number_range is not None and not number_range[0] <= value <= number_range[1]:
            report.add(
                obj.id,
                "attribute-range",
                f"{use.name}={value} outside [{number_range[0]}, {number_range[1]}]",
            )
    elif base.domain == "enum":
        if allowed is not None and value not in allowed:
            report.add(obj.id, "attribute-range", f"{use.name}={value!r} not in allowed set")
    elif base.domain == "boolean":
        if not isinstance(value, bool):
            report.add(obj.id, "attribute-type", f"{use.name}: expected a boolean")
    elif base.domain == "text":
        if not isinstance(value, str):
            report.add(obj.id, "attribute-type", f"{use.name}: expected text")


def _validate_one(
    report: ValidationReport, world: WorldMap, obj: ObjectInstance, seen: set[str]
) -> None:
    if obj.id in seen:
        return
    seen.add(obj.id)
    ontology = world.ontology
    type_def = ontology.types.get(obj.type_name)
    if type_def is None:
        report.add(obj.id, "unknown-type", f"type {obj.type_name!r} not in ontology")
        return
    if type_def.kind == "intermediate":
        report.add(obj.id, "intermediate-type", f"{obj.type_name} is not instantiable")

    uses = ontology.effective_attributes(obj.type_name)
    for name, use in sorted(uses.items()):
        if name in obj.attribute_values:
            _check_value(report, ontology, obj, use, obj.attribute_values[name])
        elif use.required:
            report.add(obj.id, "missing-attribute", f"required attribute {name} absent")
    for name in sorted(obj.attribute_values):
        if name not in uses:
            report.add(obj.id, "undeclared-attribute", f"attribute {name} not declared")

    for role, spec in sorted(ontology.effective_subobjects(obj.type_name).items()):
        ids = obj.subobjects.get(role, ())
        if not ids:
            report.add(obj.id, "missing-subobject", f"missing obligatory sub-object {role}")
            continue
        count_ok = len(ids) == spec.min_count if spec.exact else len(ids) >= spec.min_count
        if not count_ok:
            relation = "exactly" if spec.exact else "at least"
            report.add(
                obj.id,
                "subobject-count",
                f"{role}: expected {relation} {spec.min_count}, got {len(ids)}",
            )
        for sub_id in ids:
            sub = world.objects.get(sub_id)
            if sub is None:
                report.add(obj.id, "unknown-subobject", f"{role}: {sub_id} not in map")
            elif not is_subtype(ontology, sub.type_name, spec.type_name):
                report.add(
                    obj.id,
                    "subobject-type",
                    f"{role}: {sub_id} is {sub.type_name}, expected {spec.type_name}",
                )
            else:
                _validate_one(report, world, sub, seen)
    for role in sorted(obj.subobjects):
        if role not in ontology.effective_subobjects(obj.type_name):
            report.add(obj.id, "undeclared-subobject", f"sub-object role {role} not declared")

    for constraint in ontology.effective_constraints(obj.type_name):
        try:
            holds = fm.evaluate(constraint, world, {"self": obj.id})
        except Exception as exc:  # constraint evaluation errors are violations
            report.add(obj.id, "constraint-error", str(exc))
            continue
        if not holds:
            report.add(
                obj.id, "structural-constraint", fm.print_formula(constraint)
            )


def validate_instance(ontology: Ontology, world: WorldMap, object_id: str) -> ValidationReport:
    """Validate one object (recursively over sub-objects) against its type."""
    if world.ontology is not ontology:
        world = replace(world, ontology=ontology)
    obj = world.objects.get(object_id)
    if obj is None:
        raise UnknownObject(object_id)
    report = ValidationReport()
    _validate_one(report, world, obj, set())
    return report


def validate_map(ontology: Ontology, world: WorldMap) -> ValidationReport:
    """Validate every object plus tuple argument resolution."""
    report = ValidationReport()
    seen: set[str] = set()
    for obj_id in sorted(world.objects):
        _validate_one(report, world, world.objects[obj_id], seen)
    for relation, args in sorted(world.relation_tuples, key=repr):
        rel = ontology.relations.get(relation)
        if rel is None:
            report.add("<map>", "unknown-relation", f"tuple relation {relation!r} undeclared")
            continue
        if rel.semantics != "extensional":
            report.add("<map>", "computed-tuple", f"{relation} tuples may not be asserted")
            continue
        if len(args) != rel.arity:
            report.add("<map>", "tuple-arity", f"{relation}{args!r}")
            continue
        for kind, value in zip(rel.argument_kinds, args):
            if kind == "object" and value not in world.objects:
                report.add("<map>", "tuple-object", f"{relation}: unknown object {value!r}")
    return report
