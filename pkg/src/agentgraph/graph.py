"""Collaboration-graph data model: role vocabulary, canonical topologies, validation."""

from __future__ import annotations

import heapq
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from typing import Iterable, Sequence

from agentgraph.errors import InputError, ParseError, StructureError

Edge = tuple[int, int]

START = "<START>"
END = "<END>"


@dataclass(frozen=True)
class RoleVocabulary:
    """Domain roles at indices 0..R-1, then END at R and START at R+1."""

    names: tuple[str, ...]
    prompts: tuple[str, ...] = ()

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise InputError("role names must be unique")
        if START in self.names or END in self.names:
            raise InputError("reserved tokens cannot be role names")
        if not self.names:
            raise InputError("empty role vocabulary")
        object.__setattr__(self, "_lookup", {n: i for i, n in enumerate(self.names)})

    @classmethod
    def default(cls) -> RoleVocabulary:
        raw = json.loads(resources.files("agentgraph.resources").joinpath("roles.json").read_text())
        return cls.from_json(raw)

    @classmethod
    def from_json(cls, raw: dict) -> RoleVocabulary:
        roles = raw["roles"]
        return cls(tuple(r["name"] for r in roles), tuple(r.get("prompt", "") for r in roles))

    @classmethod
    def load(cls, path) -> RoleVocabulary:
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def __len__(self) -> int:
        return len(self.names)

    @property
    def end_index(self) -> int:
        return len(self.names)

    @property
    def start_index(self) -> int:
        return len(self.names) + 1

    def index(self, name: str) -> int:
        try:
            return self._lookup[name]
        except KeyError:
            raise InputError(f"unknown role {name!r}") from None

    def prompt(self, index: int) -> str:
        if self.prompts and self.prompts[index]:
            return self.prompts[index]
        return f"You are a {self.names[index]}."


class TopologyKind(str, Enum):
    CHAIN = "Chain"
    STAR = "Star"
    TREE = "Tree"
    LAYERED = "Layered"
    COMPLETE = "Complete"
    MESH = "Mesh"

    @classmethod
    def parse(cls, name: str) -> TopologyKind:
        aliases = {"fullconnected": cls.COMPLETE, "fullyconnected": cls.COMPLETE}
        key = name.replace("_", "").replace(" ", "").lower()
        if key in aliases:
            return aliases[key]
        for kind in cls:
            if kind.value.lower() == key:
                return kind
        raise InputError(f"unknown topology kind {name!r}")


MIN_SIZE = {
    TopologyKind.CHAIN: 2,
    TopologyKind.STAR: 3,
    TopologyKind.TREE: 3,
    TopologyKind.LAYERED: 3,
    TopologyKind.COMPLETE: 3,
    TopologyKind.MESH: 3,
}


@dataclass(frozen=True)
class MasGraph:
    """Role-annotated DAG. Node position is generation order; edges run low→high index."""

    nodes: tuple[int, ...]
    edges: tuple[Edge, ...] = ()
    query: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(int(r) for r in self.nodes))
        object.__setattr__(self, "edges", tuple(sorted((int(a), int(b)) for a, b in self.edges)))

    @classmethod
    def build(cls, nodes: Sequence[int], edges: Iterable[Edge], query: str | None = None) -> MasGraph:
        """Construct and enforce the structural invariants."""
        g = cls(tuple(nodes), tuple(edges), query)
        problems = structural_problems(g)
        if problems:
            raise StructureError("; ".join(problems))
        return g

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def edge_set(self) -> frozenset[Edge]:
        return frozenset(self.edges)

    def providers(self, v: int) -> list[int]:
        return sorted(a for a, b in self.edges if b == v)

    def successors(self, v: int) -> list[int]:
        return sorted(b for a, b in self.edges if a == v)

    def with_query(self, query: str | None) -> MasGraph:
        return MasGraph(self.nodes, self.edges, query)

    def to_json(self, vocab: RoleVocabulary) -> dict:
        return {
            "query": self.query,
            "roles": [vocab.names[r] for r in self.nodes],
            "edges": format_edges(self.edges),
        }

    @classmethod
    def from_json(cls, obj: dict, vocab: RoleVocabulary, strict: bool = True) -> MasGraph:
        nodes = [vocab.index(name) for name in obj["roles"]]
        edges = parse_edges(obj.get("edges", ""), strict=strict)
        if strict:
            return cls.build(nodes, edges, obj.get("query"))
        return cls(tuple(nodes), edges, obj.get("query"))

    def to_dot(self, vocab: RoleVocabulary, name: str = "mas") -> str:
        lines = [f"digraph {name} {{"]
        for i, r in enumerate(self.nodes):
            label = f"{i}: {vocab.names[r]}".replace("\\", "\\\\").replace('"', '\\"')
            lines.append(f'  {i} [label="{label}"];')
        for a, b in self.edges:
            lines.append(f"  {a} -> {b};")
        lines.append("}")
        return "\n".join(lines) + "\n"


def structural_problems(g: MasGraph, n_roles: int | None = None) -> list[str]:
    problems = []
    n = len(g.nodes)
    if n < 1:
        problems.append("graph has no nodes")
    seen = set()
    for a, b in g.edges:
        if (a, b) in seen:
            problems.append(f"duplicate edge {a}->{b}")
        seen.add((a, b))
        if not (0 <= a < n and 0 <= b < n):
            problems.append(f"edge {a}->{b} references a missing node")
        elif a == b:
            problems.append(f"self-loop {a}->{b}")
        elif a > b:
            problems.append(f"ordering violation {a}->{b}")
    if n_roles is not None:
        for i, r in enumerate(g.nodes):
            if r in (n_roles, n_roles + 1):
                problems.append(f"node {i} uses a reserved token")
            elif not 0 <= r < n_roles:
                problems.append(f"node {i} role index {r} out of range")
    return problems


@dataclass
class ValidityReport:
    acyclic: bool
    problems: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.acyclic and not self.problems

    def __bool__(self) -> bool:
        return self.ok


def validate(g: MasGraph, vocab: RoleVocabulary | None = None) -> ValidityReport:
    problems = structural_problems(g, len(vocab) if vocab is not None else None)
    try:
        _kahn(len(g.nodes), [(a, b) for a, b in g.edges if 0 <= a < len(g.nodes) and 0 <= b < len(g.nodes)])
        acyclic = True
    except StructureError:
        acyclic = False
    return ValidityReport(acyclic, problems)


def _kahn(n: int, edges: Iterable[Edge]) -> list[int]:
    indeg = [0] * n
    out: list[list[int]] = [[] for _ in range(n)]
    for a, b in set(edges):
        out[a].append(b)
        indeg[b] += 1
    heap = [v for v in range(n) if indeg[v] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        v = heapq.heappop(heap)
        order.append(v)
        for w in out[v]:
            indeg[w] -= 1
            if indeg[w] == 0:
                heapq.heappush(heap, w)
    if len(order) != n:
        raise StructureError("cycle detected")
    return order


def topological_order(g: MasGraph) -> list[int]:
    """Kahn's algorithm, always releasing the lowest ready index first."""
    return _kahn(len(g.nodes), g.edges)


def reindex_topologically(g: MasGraph) -> MasGraph:
    """Relabel nodes so that index order equals the deterministic topological order."""
    order = topological_order(g)
    new_index = {old: new for new, old in enumerate(order)}
    return MasGraph.build(
        [g.nodes[old] for old in order],
        [(new_index[a], new_index[b]) for a, b in g.edges],
        g.query,
    )


_TOKEN = re.compile(r"^(\d+)->(\d+)$")


def parse_edges(text: str, strict: bool = True) -> tuple[Edge, ...]:
    """Parse ``"0->1 1->2"``. Non-strict mode keeps self-loops/backward edges for validation."""
    edges = []
    for position, token in enumerate(text.split()):
        m = _TOKEN.match(token)
        if m is None:
            raise ParseError(f"malformed edge token {token!r}", position)
        a, b = int(m.group(1)), int(m.group(2))
        if strict and a == b:
            raise ParseError(f"self-loop {token!r}", position)
        if strict and a > b:
            raise ParseError(f"backward edge {token!r}", position)
        edges.append((a, b))
    if strict and len(set(edges)) != len(edges):
        raise ParseError("duplicate edge")
    return tuple(sorted(edges))


def format_edges(edges: Iterable[Edge]) -> str:
    return " ".join(f"{a}->{b}" for a, b in sorted(edges))


def _layer_sizes(n: int) -> list[int]:
    layers = 2 if n < 6 else 3
    base, extra = divmod(n, layers)
    # surplus nodes go to the later layers
    return [base + (1 if i >= layers - extra else 0) for i in range(layers)]


def canonical_edges(kind: TopologyKind, n: int) -> list[Edge]:
    kind = TopologyKind(kind)
    low = MIN_SIZE[kind]
    if n < low:
        raise InputError(f"{kind.value} needs at least {low} nodes, got {n}")
    if kind is TopologyKind.CHAIN:
        return [(i, i + 1) for i in range(n - 1)]
    if kind is TopologyKind.STAR:
        return [(0, i) for i in range(1, n)]
    if kind is TopologyKind.TREE:
        return [((i - 1) // 2, i) for i in range(1, n)]
    if kind is TopologyKind.COMPLETE:
        return [(i, j) for i in range(n) for j in range(i + 1, n)]
    if kind is TopologyKind.MESH:
        return [(i, i + 1) for i in range(n - 1)] + [(i, i + 2) for i in range(n - 2)]
    sizes = _layer_sizes(n)
    starts = [0]
    for s in sizes:
        starts.append(starts[-1] + s)
    edges = []
    for li in range(len(sizes) - 1):
        for a in range(starts[li], starts[li + 1]):
            for b in range(starts[li + 1], starts[li + 2]):
                edges.append((a, b))
    return edges


def make_canonical(
    kind: TopologyKind | str, n: int, roles: Sequence[int], query: str | None = None
) -> MasGraph:
    kind = kind if isinstance(kind, TopologyKind) else TopologyKind.parse(kind)
    if len(roles) != n:
        raise InputError(f"{n} nodes need {n} roles, got {len(roles)}")
    return MasGraph.build(roles, canonical_edges(kind, n), query)
