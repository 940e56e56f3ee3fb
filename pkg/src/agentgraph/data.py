"""Training corpora for the three curriculum stages.

Stage 1 is a balanced grid of canonical graphs with random roles and no
query. Stage 2 pairs templated queries with topologies under the synthesis
rules (a 2-agent team is a Chain; a 3-agent team is never Complete; agent
counts 2-6 equally often). An optional chat-model client can replace the
templates. Stage 3 keeps the two best-scoring topologies per query.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from agentgraph import __version__
from agentgraph.embed import EmbeddingProvider, HashEmbedder
from agentgraph.executor import EchoBackend, checkpoint_score, execute
from agentgraph.errors import DataError, InputError, ParseError, SynthesisQualityError
from agentgraph.graph import (
    MIN_SIZE,
    MasGraph,
    RoleVocabulary,
    TopologyKind,
    canonical_edges,
    format_edges,
    make_canonical,
    parse_edges,
    validate,
)
from agentgraph.numeric import make_rng

log = logging.getLogger(__name__)

STAGE1_KINDS = (
    TopologyKind.CHAIN,
    TopologyKind.STAR,
    TopologyKind.TREE,
    TopologyKind.LAYERED,
    TopologyKind.COMPLETE,
)
SYNTH_KINDS = (
    TopologyKind.CHAIN,
    TopologyKind.STAR,
    TopologyKind.MESH,
    TopologyKind.LAYERED,
    TopologyKind.COMPLETE,
)
STAGE3_KINDS = (
    TopologyKind.CHAIN,
    TopologyKind.LAYERED,
    TopologyKind.STAR,
    TopologyKind.MESH,
    TopologyKind.COMPLETE,
)
DOMAINS = ("code", "math", "multiple_choice", "knowledge", "medical", "psychology")


# records -----------------------------------------------------------------------


@dataclass(frozen=True)
class TopologyRecord:
    query: str | None
    agent_count: int
    roles: tuple[str, ...]
    topology: str
    edges: str

    def problems(self, vocab: RoleVocabulary | None = None, synthesis: bool = True) -> list[str]:
        """Every violated invariant; ``synthesis`` adds the 2-agent and 3-agent topology rules."""
        out = []
        if self.agent_count != len(self.roles):
            out.append(f"agent_count {self.agent_count} != {len(self.roles)} roles")
        try:
            kind = TopologyKind.parse(self.topology)
        except InputError as exc:
            out.append(str(exc))
            kind = None
        try:
            edges = parse_edges(self.edges, strict=True)
        except ParseError as exc:
            out.append(f"edges: {exc}")
            edges = None
        if vocab is not None:
            unknown = [r for r in self.roles if r not in vocab.names]
            if unknown:
                out.append(f"unknown roles {unknown}")
        if edges is not None:
            n = len(self.roles)
            bad = [e for e in edges if not (0 <= e[0] < n and 0 <= e[1] < n)]
            if bad:
                out.append(f"edges {format_edges(bad)} reference missing agents")
            elif n:
                report = validate(MasGraph(tuple(range(n)), edges))
                out.extend(report.problems)
        if synthesis and kind is not None:
            if self.agent_count == 2 and kind is not TopologyKind.CHAIN:
                out.append("a 2-agent team must be a Chain")
            if self.agent_count == 3 and kind is TopologyKind.COMPLETE:
                out.append("a 3-agent team cannot be Complete")
        if self.query is not None and not self.query.strip():
            out.append("empty query")
        return out

    def check(self, vocab: RoleVocabulary | None = None, synthesis: bool = True) -> TopologyRecord:
        problems = self.problems(vocab, synthesis)
        if problems:
            raise DataError("; ".join(problems))
        return self

    def to_graph(self, vocab: RoleVocabulary) -> MasGraph:
        return MasGraph.build([vocab.index(r) for r in self.roles], parse_edges(self.edges), self.query)

    def to_json(self) -> dict:
        d = asdict(self)
        d["roles"] = list(self.roles)
        return d

    @classmethod
    def from_json(cls, obj: Mapping) -> TopologyRecord:
        if not isinstance(obj, Mapping):
            raise DataError("record must be a JSON object")
        missing = [k for k in ("agent_count", "roles", "topology", "edges") if k not in obj]
        if missing:
            raise DataError(f"missing keys {missing}")
        roles = obj["roles"]
        if not isinstance(roles, list) or not all(isinstance(r, str) for r in roles):
            raise DataError("roles must be a list of strings")
        count = obj["agent_count"]
        if not isinstance(count, int) or isinstance(count, bool):
            raise DataError("agent_count must be an integer")
        if not isinstance(obj["edges"], str) or not isinstance(obj["topology"], str):
            raise DataError("edges and topology must be strings")
        query = obj.get("query")
        if query is not None and not isinstance(query, str):
            raise DataError("query must be a string or null")
        return cls(query, count, tuple(roles), obj["topology"], obj["edges"])

    @classmethod
    def from_graph(cls, g: MasGraph, kind: TopologyKind, vocab: RoleVocabulary) -> TopologyRecord:
        return cls(g.query, len(g), tuple(vocab.names[r] for r in g.nodes), kind.value, format_edges(g.edges))


def write_jsonl(path: str | Path, records: Iterable[TopologyRecord]) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), ensure_ascii=False) + "\n")
            n += 1
    return n


def read_jsonl(path: str | Path) -> list[TopologyRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(TopologyRecord.from_json(json.loads(line)))
            except (json.JSONDecodeError, DataError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return out


@dataclass
class CorpusManifest:
    corpus_id: str
    stage: int
    record_count: int
    seed: int
    generator_version: str = __version__
    topology_histogram: dict[str, int] = field(default_factory=dict)
    size_histogram: dict[str, int] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @classmethod
    def describe(cls, corpus_id: str, stage: int, seed: int, records: Sequence[TopologyRecord], **extra):
        kinds = Counter(TopologyKind.parse(r.topology).value for r in records)
        sizes = Counter(str(r.agent_count) for r in records)
        return cls(
            corpus_id,
            stage,
            len(records),
            seed,
            topology_histogram=dict(sorted(kinds.items())),
            size_histogram=dict(sorted(sizes.items(), key=lambda kv: int(kv[0]))),
            extra=extra,
        )

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path: str | Path) -> CorpusManifest:
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def manifest_path(corpus: str | Path) -> Path:
    corpus = Path(corpus)
    return corpus.with_name(corpus.stem + ".manifest.json")


def save_corpus(path: str | Path, records: Sequence[TopologyRecord], manifest: CorpusManifest) -> Path:
    write_jsonl(path, records)
    side = manifest_path(path)
    manifest.write(side)
    return side


# stage 1 -----------------------------------------------------------------------


def allocate(count: int, cells: int) -> list[int]:
    """Split ``count`` over ``cells`` as evenly as possible; earlier cells take the remainder."""
    base, extra = divmod(count, cells)
    return [base + (1 if i < extra else 0) for i in range(cells)]


def gen_stage1(
    count: int = 800,
    sizes: Sequence[int] = tuple(range(3, 11)),
    seed: int = 0,
    vocab: RoleVocabulary | None = None,
) -> tuple[list[TopologyRecord], CorpusManifest]:
    """Canonical graphs spread evenly over (size, kind) cells with uniformly drawn roles.

    Cells are enumerated size-major so a remainder lands on different kinds.
    """
    if count < 1:
        raise InputError("count must be >= 1")
    vocab = vocab or RoleVocabulary.default()
    cells = [(n, k) for n in sizes for k in STAGE1_KINDS]
    for n, k in cells:
        if n < MIN_SIZE[k]:
            raise InputError(f"size {n} is too small for {k.value}")
    rng = make_rng(seed, "stage1")
    records = []
    for (n, kind), quota in zip(cells, allocate(count, len(cells))):
        for _ in range(quota):
            roles = rng.integers(0, len(vocab), size=n).tolist()
            g = make_canonical(kind, n, roles)
            records.append(TopologyRecord.from_graph(g, kind, vocab).check(vocab, synthesis=False))
    order = rng.permutation(len(records))
    records = [records[i] for i in order]
    return records, CorpusManifest.describe(f"stage1-s{seed}", 1, seed, records)


# query templates ---------------------------------------------------------------

_FILL = {
    "n": [str(v) for v in (3, 5, 7, 8, 12, 15, 20, 24, 36, 48, 64, 100)],
    "m": [str(v) for v in (2, 4, 6, 9, 10, 11, 13, 17, 25, 30)],
    "lang": ["Python", "a Python function", "a short Python program"],
    "structure": ["list", "string", "dictionary", "binary tree", "matrix", "linked list"],
    "goal": [
        "returns the count of odd numbers",
        "removes duplicate entries while keeping order",
        "finds the longest increasing run",
        "checks whether it is a palindrome",
        "returns the k largest values",
        "merges overlapping intervals",
        "computes a running median",
        "reverses every second element",
    ],
    "item": ["apples", "tickets", "books", "marbles", "chairs", "coins", "stamps", "bottles"],
    "person": ["Ana", "Ben", "Chen", "Dara", "Eli", "Fatima", "Goran", "Hana"],
    "subject": ["biology", "economics", "chemistry", "world history", "physics", "geography", "law"],
    "option": ["A", "B", "C", "D"],
    "topic": [
        "the printing press",
        "the water cycle",
        "the Silk Road",
        "plate tectonics",
        "the French Revolution",
        "photosynthesis",
        "the Apollo program",
        "the Roman aqueducts",
    ],
    "symptom": [
        "a persistent dry cough",
        "recurring migraines",
        "joint pain in the mornings",
        "a rash after eating shellfish",
        "shortness of breath on stairs",
        "trouble sleeping and fatigue",
    ],
    "age": [str(v) for v in (16, 19, 27, 35, 44, 58, 63, 71)],
    "feeling": [
        "anxious before exams",
        "unmotivated at work",
        "lonely after moving cities",
        "irritable with family",
        "overwhelmed by deadlines",
        "stuck in negative thoughts",
    ],
}

TEMPLATES: dict[str, tuple[str, ...]] = {
    "code": (
        "Write {lang} that takes a {structure} and {goal}.",
        "Implement a function over a {structure} of length up to {n} that {goal}, with tests.",
        "Fix the bug in my code: given a {structure} it should {goal} but fails when the input has {m} items.",
        "Design a class that stores a {structure} and {goal} in better than quadratic time.",
    ),
    "math": (
        "{person} has {n} {item} and gives away {m}. Then buys twice as many as remain. How many now?",
        "What is the sum of all integers from 1 to {n} that are divisible by {m}?",
        "A rectangle has perimeter {n} and one side {m}. Find its area.",
        "Solve for x: {m}x + {n} = {n}x - {m}.",
        "{person} reads {m} pages a day. How many days to finish {n} books of 120 pages?",
    ),
    "multiple_choice": (
        "Which statement about {subject} is correct? Choose one of A, B, C, D; hint: check option {option}.",
        "Multiple choice ({subject}): which of the four options best explains {topic}?",
        "In {subject}, what happens when a quantity grows by {m} percent {n} times? Options A-D.",
        "Pick the odd one out among four {subject} terms and justify the letter.",
    ),
    "knowledge": (
        "Explain the origins and impact of {topic}.",
        "Who were the key people involved in {topic}, and what did each contribute?",
        "How did {topic} change {subject} over the following {n} years?",
        "Compare {topic} with a similar development and give {m} differences.",
    ),
    "medical": (
        "A {age}-year-old patient reports {symptom}. What are likely causes and next steps?",
        "What tests would a doctor order for {symptom} lasting {m} weeks?",
        "Is {symptom} in a {age}-year-old a reason to see a specialist?",
        "List home care measures and warning signs for {symptom} in a {age}-year-old.",
    ),
    "psychology": (
        "I am {age} and feel {feeling}. What can I do about it?",
        "My friend has been {feeling} for {m} weeks. How can I support them?",
        "Which therapy approaches help a {age}-year-old who feels {feeling}?",
        "Explain the psychology behind feeling {feeling} and {m} coping strategies.",
    ),
}


def render_query(domain: str, rng: np.random.Generator) -> str:
    """Fill a random template of ``domain`` from the slot tables."""
    templates = TEMPLATES[domain]
    text = templates[int(rng.integers(len(templates)))]
    slots = {}
    for key, values in _FILL.items():
        if "{" + key + "}" in text:
            slots[key] = values[int(rng.integers(len(values)))]
    return text.format(**slots)


def load_domain_roles(vocab: RoleVocabulary | None = None, path: str | Path | None = None) -> dict[str, list[str]]:
    """Domain -> suitable role names, from the packaged table unless ``path`` is given."""
    if path is None:
        raw = json.loads(resources.files("agentgraph.resources").joinpath("domains.json").read_text())
    else:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if vocab is not None:
        for domain, roles in raw.items():
            unknown = [r for r in roles if r not in vocab.names]
            if unknown:
                raise DataError(f"domain {domain!r} names unknown roles {unknown}")
    return raw


def allowed_kinds(agent_count: int) -> tuple[TopologyKind, ...]:
    """Synthesis rules: 2 agents -> Chain; 3 agents -> anything but Complete; else all five."""
    if agent_count == 2:
        return (TopologyKind.CHAIN,)
    if agent_count == 3:
        return tuple(k for k in SYNTH_KINDS if k is not TopologyKind.COMPLETE)
    return SYNTH_KINDS


# stage 2 -----------------------------------------------------------------------


def gen_stage2_templated(
    count: int = 1000,
    seed: int = 0,
    vocab: RoleVocabulary | None = None,
    agent_counts: Sequence[int] = (2, 3, 4, 5, 6),
    domain_roles: Mapping[str, Sequence[str]] | None = None,
) -> tuple[list[TopologyRecord], CorpusManifest]:
    """Templated (query, topology) pairs obeying the synthesis rules.

    Agent counts and domains are each allocated evenly; within an agent count
    the permitted kinds are cycled. Roles come from the query's domain without
    repetition; the first pass over each domain walks its whole role list so
    every role in the table appears.
    """
    if count < 1:
        raise InputError("count must be >= 1")
    vocab = vocab or RoleVocabulary.default()
    domain_roles = dict(domain_roles or load_domain_roles(vocab))
    domains = [d for d in DOMAINS if d in domain_roles] + sorted(set(domain_roles) - set(DOMAINS))
    rng = make_rng(seed, "stage2")
    sizes = [n for n, q in zip(agent_counts, allocate(count, len(agent_counts))) for _ in range(q)]
    doms = [domains[i % len(domains)] for i in range(count)]
    doms = [doms[i] for i in rng.permutation(count)]
    per_size: Counter = Counter()
    # rotating cursor per domain so early records sweep the full role list
    cursor = {d: 0 for d in domains}
    records = []
    for n, domain in zip(sizes, doms):
        kinds = allowed_kinds(n)
        kind = kinds[per_size[n] % len(kinds)]
        per_size[n] += 1
        pool = list(domain_roles[domain])
        if n > len(pool):
            raise DataError(f"domain {domain!r} has {len(pool)} roles, cannot staff {n} agents")
        start = cursor[domain]
        rotated = pool[start:] + pool[:start]
        head = rotated[:1]
        rest = [rotated[1 + int(i)] for i in rng.permutation(len(pool) - 1)[: n - 1]]
        roles = head + rest
        cursor[domain] = (start + 1) % len(pool)
        g = make_canonical(kind, n, [vocab.index(r) for r in roles], render_query(domain, rng))
        records.append(TopologyRecord.from_graph(g, kind, vocab).check(vocab))
    covered = sorted({r for rec in records for r in rec.roles})
    missing = [r for r in vocab.names if r not in covered]
    manifest = CorpusManifest.describe(
        f"stage2-templated-s{seed}",
        2,
        seed,
        records,
        domains=dict(Counter(doms)),
        roles_missing=missing,
        source="templated",
    )
    return records, manifest


def memorization_set(
    count: int = 20,
    seed: int = 0,
    max_cosine: float = 0.5,
    vocab: RoleVocabulary | None = None,
    provider: EmbeddingProvider | None = None,
) -> list[TopologyRecord]:
    """A small fixed set of stage-2 style pairs for overfitting checks.

    Records are visited size by size in turn, and a record is kept only when
    its query embedding has |cosine| below ``max_cosine`` against every record
    already kept, so no two targets hide behind near-identical queries.
    """
    provider = provider or HashEmbedder()
    pool, _ = gen_stage2_templated(count=max(400, 20 * count), seed=seed, vocab=vocab)
    order = sorted(range(len(pool)), key=lambda i: (i % (len(pool) // 5), i))
    kept: list[TopologyRecord] = []
    vectors: list[np.ndarray] = []
    for i in order:
        v = provider.embed(pool[i].query)
        if all(abs(float(v @ u)) < max_cosine for u in vectors):
            kept.append(pool[i])
            vectors.append(v)
            if len(kept) == count:
                return kept
    raise DataError(f"only {len(kept)} of {count} records pass the cosine cap {max_cosine}")


def stage2_system_prompt(vocab: RoleVocabulary | None = None) -> str:
    vocab = vocab or RoleVocabulary.default()
    text = resources.files("agentgraph.resources").joinpath("stage2_system_prompt.txt").read_text()
    return text.replace("{roles}", "\n".join(f"- {name}" for name in vocab.names))


@dataclass
class LineRejection:
    line: int
    reason: str


def parse_synthesis_reply(
    text: str, vocab: RoleVocabulary, max_invalid: float = 0.5
) -> tuple[list[TopologyRecord], list[LineRejection]]:
    """Validate every non-blank line of a JSONL reply; invalid lines are rejected, never repaired."""
    accepted, rejected = [], []
    seen = 0
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("```"):
            continue
        seen += 1
        try:
            rec = TopologyRecord.from_json(json.loads(line))
            if rec.query is None:
                raise DataError("missing query")
            rec.check(vocab)
        except (json.JSONDecodeError, DataError) as exc:
            rejected.append(LineRejection(lineno, str(exc)))
            log.warning("rejected line %d: %s", lineno, exc)
            continue
        accepted.append(rec)
    if seen == 0 or len(rejected) > max_invalid * seen:
        raise SynthesisQualityError(f"{len(rejected)} of {seen} reply lines were invalid")
    return accepted, rejected


def gen_stage2_llm(
    client,
    count: int = 1000,
    vocab: RoleVocabulary | None = None,
    batch: int = 50,
    max_requests: int | None = None,
) -> tuple[list[TopologyRecord], list[LineRejection]]:
    """Ask a chat model (``client.complete(messages) -> str``) for records until ``count`` are valid."""
    vocab = vocab or RoleVocabulary.default()
    system = stage2_system_prompt(vocab)
    records: list[TopologyRecord] = []
    rejections: list[LineRejection] = []
    limit = max_requests if max_requests is not None else 4 * (count // batch + 1)
    for request in range(limit):
        if len(records) >= count:
            break
        want = min(batch, count - len(records))
        messages = [
            {"role": "system", "content": system},
            {"role": "user", "content": f"Generate {want} examples (request {request + 1})."},
        ]
        got, bad = parse_synthesis_reply(client.complete(messages), vocab)
        records.extend(got)
        rejections.extend(bad)
    return records[:count], rejections


# stage 3 -----------------------------------------------------------------------


def stage3_kinds(size: int) -> tuple[TopologyKind, ...]:
    allowed = allowed_kinds(size)
    return tuple(k for k in STAGE3_KINDS if k in allowed and size >= MIN_SIZE[k])


@dataclass(frozen=True)
class ScoredCandidate:
    kind: TopologyKind
    score: float
    n_edges: int

    def sort_key(self):
        return (-self.score, self.n_edges, self.kind.value)


def top_two(scores: Mapping[TopologyKind | str, float], size: int) -> list[ScoredCandidate]:
    """Best two by score; ties go to fewer edges, then kind name."""
    cands = []
    for kind, score in scores.items():
        kind = kind if isinstance(kind, TopologyKind) else TopologyKind.parse(kind)
        cands.append(ScoredCandidate(kind, float(score), len(canonical_edges(kind, size))))
    if len(cands) < 2:
        raise DataError(f"need at least 2 scored candidates, got {len(cands)}")
    return sorted(cands, key=ScoredCandidate.sort_key)[:2]


@dataclass(frozen=True)
class Stage3Query:
    query: str
    domain: str
    roles: tuple[str, ...]
    checkpoints: tuple[str, ...]  # answer fields the mock scorer looks for


def stage3_queries(
    per_domain: int = 40,
    size: int = 4,
    seed: int = 0,
    vocab: RoleVocabulary | None = None,
    domain_roles: Mapping[str, Sequence[str]] | None = None,
) -> list[Stage3Query]:
    """Templated queries with domain roles and seeded mock checkpoints (node indices the answer should reach)."""
    vocab = vocab or RoleVocabulary.default()
    domain_roles = dict(domain_roles or load_domain_roles(vocab))
    rng = make_rng(seed, "stage3")
    seen: set[str] = set()
    out = []
    for domain in [d for d in DOMAINS if d in domain_roles]:
        pool = list(domain_roles[domain])
        for _ in range(per_domain):
            roles = tuple(pool[int(i)] for i in rng.permutation(len(pool))[:size])
            k = int(rng.integers(1, size + 1))
            picks = sorted(int(i) for i in rng.permutation(size)[:k])
            out.append(Stage3Query(_fresh_query(domain, rng, seen), domain, roles, tuple(str(i) for i in picks)))
    return out


def _fresh_query(domain: str, rng: np.random.Generator, seen: set[str], attempts: int = 200) -> str:
    """A rendered query not in ``seen``; fixture scores are keyed by query text."""
    for _ in range(attempts):
        text = render_query(domain, rng)
        if text not in seen:
            seen.add(text)
            return text
    raise DataError(f"templates for {domain!r} cannot supply another distinct query")


def mock_scores(q: Stage3Query, size: int, vocab: RoleVocabulary, rounds: int = 1) -> dict[TopologyKind, float]:
    """Score each candidate by running it on the echo backend against the query's checkpoints."""
    scores = {}
    for kind in stage3_kinds(size):
        g = make_canonical(kind, size, [vocab.index(r) for r in q.roles], q.query)
        report = execute(g, q.query, EchoBackend(), rounds=rounds, vocab=vocab)
        scores[kind] = checkpoint_score(report.final_answer or "", q.checkpoints)
    return scores


def build_stage3(
    per_domain: int = 40,
    size: int = 4,
    seed: int = 0,
    vocab: RoleVocabulary | None = None,
    fixture_scores: Mapping[str, Mapping[str, float]] | None = None,
    queries: Sequence[Stage3Query] | None = None,
    scorer: Callable[[Stage3Query], Mapping[TopologyKind | str, float]] | None = None,
) -> tuple[list[TopologyRecord], CorpusManifest]:
    """Two top-scoring (query, topology) records per query.

    Scores come from ``fixture_scores`` (query text -> kind -> score) when given,
    else from ``scorer``, else from mock execution on the echo backend.
    """
    vocab = vocab or RoleVocabulary.default()
    queries = list(queries) if queries is not None else stage3_queries(per_domain, size, seed, vocab)
    records = []
    for q in queries:
        if fixture_scores is not None:
            if q.query not in fixture_scores:
                raise DataError(f"no fixture scores for query {q.query!r}")
            scores = fixture_scores[q.query]
        elif scorer is not None:
            scores = scorer(q)
        else:
            scores = mock_scores(q, size, vocab)
        legal = set(stage3_kinds(size))
        scores = {k: v for k, v in scores.items() if TopologyKind.parse(str(getattr(k, "value", k))) in legal}
        for cand in top_two(scores, size):
            g = make_canonical(cand.kind, size, [vocab.index(r) for r in q.roles], q.query)
            records.append(TopologyRecord.from_graph(g, cand.kind, vocab).check(vocab))
    return records, CorpusManifest.describe(f"stage3-s{seed}", 3, seed, records, queries=len(queries))
