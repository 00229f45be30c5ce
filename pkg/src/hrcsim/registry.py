"""Service Registry: published descriptions and discovery by effect matching.

Matching is syntactic unification at the atom level: an entry matches a goal
when some binding of its effect variables makes one of its effect conjuncts
equal to a goal conjunct. Results are deterministically ordered by
(cost, average realization time, provider id, service type).
"""

from __future__ import annotations

from dataclasses import dataclass

from . import formula as fm
from .errors import UnknownId
from .services import ServiceDescription, ServiceKind


@dataclass(frozen=True)
class RegistryEntry:
    provider_id: str
    description: ServiceDescription
    published_at: int

    @property
    def key(self) -> tuple[str, str]:
        return (self.provider_id, self.description.type_name)

    def sort_key(self) -> tuple:
        attrs = self.description.attributes
        return (
            attrs.cost,
            attrs.avg_realization_time,
            self.provider_id,
            self.description.type_name,
        )


@dataclass(frozen=True)
class DiscoveryFilter:
    max_cost: float | None = None
    region: frozenset[str] | None = None  # entry range must cover this region
    kind: ServiceKind | None = None

    def admits(self, entry: RegistryEntry) -> bool:
        attrs = entry.description.attributes
        if self.max_cost is not None and attrs.cost > self.max_cost:
            return False
        if self.region is not None and not attrs.covers(self.region):
            return False
        if self.kind is not None and entry.description.kind != self.kind:
            return False
        return True


class ServiceRegistry:
    """Single registry instance; all mutation and queries are serialized by the
    caller (the simulation loop)."""

    def __init__(self):
        self._entries: dict[tuple[str, str], RegistryEntry] = {}

    def register(self, provider_id: str, description: ServiceDescription, now: int = 0):
        """Publish one description; re-publishing replaces the existing entry."""
        entry = RegistryEntry(provider_id, description, now)
        self._entries[entry.key] = entry
        return entry.key

    def unregister(self, key: tuple[str, str]) -> None:
        if key not in self._entries:
            raise UnknownId(str(key))
        del self._entries[key]

    def entries(self) -> list[RegistryEntry]:
        return sorted(self._entries.values(), key=lambda e: e.sort_key())

    def __len__(self) -> int:
        return len(self._entries)

    def discover(
        self,
        goal: fm.Formula,
        filters: DiscoveryFilter | None = None,
        exclude: frozenset[str] = frozenset(),
    ) -> list[tuple[RegistryEntry, fm.Binding]]:
        """Entries whose effect can make at least one conjunct of the goal true,
        with the witnessing binding (first in deterministic enumeration order)."""
        goal_atoms = fm.conjuncts(goal)
        out: list[tuple[RegistryEntry, fm.Binding]] = []
        for entry in self.entries():
            if entry.provider_id in exclude:
                continue
            if filters is not None and not filters.admits(entry):
                continue
            binding = _match_entry(entry, goal_atoms)
            if binding is not None:
                out.append((entry, binding))
        return out

    def cognitive_entries(
        self, region: frozenset[str], exclude: frozenset[str] = frozenset()
    ) -> list[RegistryEntry]:
        """Cognitive services whose operation range covers the region, cheapest
        first."""
        return [
            e
            for e in self.entries()
            if e.description.kind == ServiceKind.COGNITIVE
            and e.provider_id not in exclude
            and e.description.attributes.covers(region)
        ]

    def physical_service_types(
        self, exclude: frozenset[str] = frozenset()
    ) -> list[ServiceDescription]:
        """Distinct physical service types available from non-excluded providers,
        sorted by type name; the planner's action vocabulary."""
        seen: dict[str, ServiceDescription] = {}
        for entry in self.entries():
            desc = entry.description
            if desc.kind != ServiceKind.PHYSICAL or entry.provider_id in exclude:
                continue
            seen.setdefault(desc.type_name, desc)
        return [seen[name] for name in sorted(seen)]

    def dump(self) -> list[dict]:
        """Ordered export for trace inspection."""
        return [
            {
                "provider": e.provider_id,
                "service": e.description.type_name,
                "kind": e.description.kind.value,
                "precondition": fm.print_formula(e.description.precondition),
                "effect": fm.print_formula(e.description.effect),
                "cost": e.description.attributes.cost,
                "avg_time": e.description.attributes.avg_realization_time,
                "published_at": e.published_at,
            }
            for e in self.entries()
        ]


def _match_entry(entry: RegistryEntry, goal_atoms: list[fm.Atom]) -> fm.Binding | None:
    try:
        effect_atoms = fm.conjuncts(entry.description.effect)
    except Exception:
        return None
    for effect_atom in effect_atoms:
        for goal_atom in goal_atoms:
            binding = fm.unify_atom(effect_atom, goal_atom, {})
            if binding is not None:
                return binding
    return None
