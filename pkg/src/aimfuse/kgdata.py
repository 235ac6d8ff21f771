"""Knowledge-graph channels, prompt embeddings, pair labels and fold splits.

File formats (all UTF-8, LF-terminated):

* triples   ``head // tail // relation``
* pairs     ``drugA // drugB // event_id``
* prompts   ``drug <TAB> modality <TAB> prompt_index <TAB> v1,v2,...``
* splits    ``fold <TAB> drug`` (unseen settings) or ``fold <TAB> pair_index`` (seen)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DomainError, LeakageError, ParseError

SEP = " // "
SELF_PAIR = (-1, -1)
"""Reserved (relation, entity) pair standing for "the drug itself"."""

SETTINGS = ("seen", "one-unseen", "both-unseen")
MODALITIES = ("biorel", "molsub", "ddigraph")


# -- triple channels ------------------------------------------------------------

@dataclass
class TripleChannel:
    """One knowledge-graph modality as (drug, relation, entity) id triples."""

    name: str
    triples: list[tuple[int, int, int]] = field(default_factory=list)
    drug_vocab: list[str] = field(default_factory=list)
    entity_vocab: list[str] = field(default_factory=list)
    relation_vocab: list[str] = field(default_factory=list)

    def __post_init__(self):
        self._drug_ids = {s: i for i, s in enumerate(self.drug_vocab)}
        self._adjacency: dict[int, list[tuple[int, int]]] | None = None

    def drug_id(self, drug: str) -> int:
        try:
            return self._drug_ids[drug]
        except KeyError:
            raise DomainError(f"drug {drug!r} is unknown to channel {self.name!r}") from None

    def has_drug(self, drug: str) -> bool:
        return drug in self._drug_ids

    def neighbors(self, drug: str) -> list[tuple[int, int]]:
        """All (relation-id, entity-id) pairs of ``drug`` in file order."""
        if self._adjacency is None:
            adj: dict[int, list[tuple[int, int]]] = {}
            for h, r, t in self.triples:
                adj.setdefault(h, []).append((r, t))
            self._adjacency = adj
        return list(self._adjacency.get(self.drug_id(drug), ()))

    def with_drugs(self, drugs: Iterable[str]) -> "TripleChannel":
        """Copy whose drug vocabulary also lists ``drugs`` (appended, degree 0)."""
        vocab = list(self.drug_vocab)
        known = set(vocab)
        for d in drugs:
            if d not in known:
                vocab.append(d)
                known.add(d)
        return TripleChannel(self.name, list(self.triples), vocab,
                             list(self.entity_vocab), list(self.relation_vocab))

    def restricted(self, keep) -> "TripleChannel":
        """Copy keeping only triples for which ``keep(head, relation, tail)`` holds (names)."""
        kept = [
            (h, r, t) for h, r, t in self.triples
            if keep(self.drug_vocab[h], self.relation_vocab[r], self.entity_vocab[t])
        ]
        return TripleChannel(self.name, kept, list(self.drug_vocab),
                             list(self.entity_vocab), list(self.relation_vocab))

    def records(self) -> list[tuple[str, str, str]]:
        """Triples as (head, tail, relation) strings, the on-disk field order."""
        return [(self.drug_vocab[h], self.entity_vocab[t], self.relation_vocab[r])
                for h, r, t in self.triples]


def channel_from_records(name: str, records: Iterable[tuple[str, str, str]]) -> TripleChannel:
    """Build a channel from (head, tail, relation) strings; ids in first-appearance order."""
    drugs: dict[str, int] = {}
    ents: dict[str, int] = {}
    rels: dict[str, int] = {}
    triples = []
    for head, tail, rel in records:
        h = drugs.setdefault(head, len(drugs))
        r = rels.setdefault(rel, len(rels))
        t = ents.setdefault(tail, len(ents))
        triples.append((h, r, t))
    return TripleChannel(name, triples, list(drugs), list(ents), list(rels))


def _read_lines(path) -> list[tuple[int, str]]:
    text = Path(path).read_text(encoding="utf-8")
    out = []
    for n, line in enumerate(text.split("\n"), start=1):
        line = line.rstrip("\r")
        if line.strip():
            out.append((n, line))
    return out


def parse_triples(path, name: str | None = None) -> TripleChannel:
    """Read a ``head // tail // relation`` file into a channel."""
    records = []
    for n, line in _read_lines(path):
        fields = line.split(SEP)
        if len(fields) != 3:
            raise ParseError(f"expected 3 fields separated by {SEP!r}, got {len(fields)}", path, n)
        records.append(tuple(fields))
    return channel_from_records(name or Path(path).stem, records)


def write_triples(channel: TripleChannel, path) -> None:
    lines = [SEP.join(rec) for rec in channel.records()]
    _write_text(path, lines)


def _write_text(path, lines: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for line in lines:
            fh.write(line + "\n")


# -- neighbour sampling ---------------------------------------------------------

def sample_neighbors(channel: TripleChannel, drug: str, size: int, seed: int) -> list[tuple[int, int]]:
    """Sample exactly ``size`` (relation-id, entity-id) pairs for ``drug``.

    Without replacement when the degree allows it, with replacement for
    under-degree drugs, and ``size`` copies of :data:`SELF_PAIR` for isolated
    drugs.  The draw depends only on (seed, drug id).
    """
    if size < 1:
        raise DomainError(f"neighbour sample size must be >= 1, got {size}")
    did = channel.drug_id(drug)
    nbrs = channel.neighbors(drug)
    if not nbrs:
        return [SELF_PAIR] * size
    rng = np.random.default_rng((int(seed), did))
    picks = rng.choice(len(nbrs), size=size, replace=len(nbrs) < size)
    return [nbrs[i] for i in picks]


def neighbor_table(channel: TripleChannel, drugs: Sequence[str], size: int, seed: int):
    """Stack sampled neighbours into (relation ids, entity ids), each len(drugs) x size."""
    rel = np.empty((len(drugs), size), dtype=np.int64)
    ent = np.empty((len(drugs), size), dtype=np.int64)
    for i, d in enumerate(drugs):
        pairs = sample_neighbors(channel, d, size, seed) if channel.has_drug(d) else [SELF_PAIR] * size
        rel[i] = [p[0] for p in pairs]
        ent[i] = [p[1] for p in pairs]
    return rel, ent


# -- prompt embeddings ----------------------------------------------------------

@dataclass
class PromptEmbeddingSet:
    """Per (drug, modality) list of prompt vectors of a shared width."""

    vectors: dict[tuple[str, str], np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        widths: dict[str, int] = {}
        for (drug, mod), arr in self.vectors.items():
            arr = np.asarray(arr, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[0] < 1:
                raise DomainError(f"prompts for ({drug}, {mod}) must be a non-empty (K, d) array")
            if widths.setdefault(mod, arr.shape[1]) != arr.shape[1]:
                raise DomainError(f"modality {mod!r} mixes prompt widths {widths[mod]} and {arr.shape[1]}")
            self.vectors[(drug, mod)] = arr

    def modalities(self) -> list[str]:
        return sorted({m for _, m in self.vectors})

    def width(self, modality: str) -> int:
        for (_, m), arr in self.vectors.items():
            if m == modality:
                return arr.shape[1]
        raise DomainError(f"no prompts for modality {modality!r}")

    def get(self, drug: str, modality: str) -> np.ndarray:
        try:
            return self.vectors[(drug, modality)]
        except KeyError:
            raise DomainError(f"no prompt embeddings for drug {drug!r}, modality {modality!r}") from None

    def has(self, drug: str, modality: str) -> bool:
        return (drug, modality) in self.vectors

    def mean_embedding(self, drug: str, modality: str) -> np.ndarray:
        return self.get(drug, modality).mean(axis=0)


def parse_prompt_embeddings(path) -> PromptEmbeddingSet:
    rows: dict[tuple[str, str], dict[int, np.ndarray]] = {}
    for n, line in _read_lines(path):
        fields = line.split("\t")
        if len(fields) != 4:
            raise ParseError(f"expected 4 tab-separated fields, got {len(fields)}", path, n)
        drug, mod, idx, vec = fields
        try:
            k = int(idx)
            values = np.array([float(x) for x in vec.split(",")], dtype=np.float64)
        except ValueError as exc:
            raise ParseError(str(exc), path, n) from None
        slot = rows.setdefault((drug, mod), {})
        if k in slot:
            raise ParseError(f"duplicate prompt index {k} for ({drug}, {mod})", path, n)
        slot[k] = values
    vectors = {key: np.stack([v[k] for k in sorted(v)]) for key, v in rows.items()}
    return PromptEmbeddingSet(vectors)


def write_prompt_embeddings(prompts: PromptEmbeddingSet, path) -> None:
    lines = []
    for (drug, mod), arr in prompts.vectors.items():
        for k, row in enumerate(arr):
            lines.append(f"{drug}\t{mod}\t{k}\t" + ",".join(repr(float(x)) for x in row))
    _write_text(path, lines)


# -- labelled pairs -------------------------------------------------------------

@dataclass
class PairDataset:
    """Labelled drug pairs; labels lie in ``range(n_events)``."""

    pairs: list[tuple[str, str, int]]
    n_events: int

    def __post_init__(self):
        if self.n_events < 2:
            raise DomainError(f"need at least 2 event classes, got {self.n_events}")
        seen: dict[frozenset, int] = {}
        for u, v, y in self.pairs:
            if u == v:
                raise DomainError(f"self pair ({u}, {v})")
            if not 0 <= y < self.n_events:
                raise DomainError(f"label {y} of ({u}, {v}) outside [0, {self.n_events})")
            key = frozenset((u, v))
            if seen.setdefault(key, y) != y:
                raise DomainError(f"pair ({u}, {v}) carries conflicting labels")

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def labels(self) -> np.ndarray:
        return np.array([y for _, _, y in self.pairs], dtype=np.int64)

    def drugs(self) -> list[str]:
        """Drugs in first-appearance order."""
        out: dict[str, None] = {}
        for u, v, _ in self.pairs:
            out.setdefault(u)
            out.setdefault(v)
        return list(out)


def parse_pairs(path, n_events: int | None = None) -> PairDataset:
    pairs = []
    for n, line in _read_lines(path):
        fields = line.split(SEP)
        if len(fields) != 3:
            raise ParseError(f"expected 3 fields separated by {SEP!r}, got {len(fields)}", path, n)
        try:
            y = int(fields[2])
        except ValueError:
            raise ParseError(f"event id {fields[2]!r} is not an integer", path, n) from None
        pairs.append((fields[0], fields[1], y))
    if n_events is None:
        n_events = max((y for *_, y in pairs), default=0) + 1
    return PairDataset(pairs, max(n_events, 2))


def write_pairs(dataset: PairDataset, path) -> None:
    _write_text(path, [f"{u}{SEP}{v}{SEP}{y}" for u, v, y in dataset.pairs])


# -- splits ---------------------------------------------------------------------

@dataclass
class Fold:
    train_pairs: list[int]
    test_pairs: list[int]
    train_drugs: frozenset[str]
    held_out: frozenset[str]


@dataclass
class SplitPlan:
    """K folds of one evaluation setting.

    ``assignment`` maps a drug name (unseen settings) or a pair index (seen)
    to its fold.
    """

    setting: str
    k: int
    assignment: dict
    folds: list[Fold]


def _check_setting(setting: str) -> None:
    if setting not in SETTINGS:
        raise ConfigError(f"unknown setting {setting!r}; expected one of {', '.join(SETTINGS)}")


def make_split(dataset: PairDataset, drugs: Sequence[str], setting: str, k: int, seed: int) -> SplitPlan:
    """Shuffle drugs (unseen settings) or pairs (seen) into ``k`` folds."""
    _check_setting(setting)
    if k < 2:
        raise ConfigError(f"need at least 2 folds, got {k}")
    known = set(drugs)
    for u, v, _ in dataset.pairs:
        if u not in known or v not in known:
            raise DomainError(f"pair ({u}, {v}) references a drug outside the drug list")
    rng = np.random.default_rng(seed)
    if setting == "seen":
        if k > len(dataset):
            raise ConfigError(f"{k} folds exceed the {len(dataset)} pairs")
        order = rng.permutation(len(dataset))
        assignment = {int(p): f for f, chunk in enumerate(np.array_split(order, k)) for p in chunk}
    else:
        if k > len(drugs):
            raise ConfigError(f"{k} folds exceed the {len(drugs)} drugs")
        order = rng.permutation(len(drugs))
        assignment = {drugs[int(i)]: f for f, chunk in enumerate(np.array_split(order, k)) for i in chunk}
    return plan_from_assignment(dataset, drugs, setting, k, assignment)


def plan_from_assignment(dataset: PairDataset, drugs: Sequence[str], setting: str, k: int,
                         assignment: dict) -> SplitPlan:
    """Derive per-fold train/test pair sets from a fold assignment."""
    _check_setting(setting)
    folds = []
    for f in range(k):
        train, test = [], []
        if setting == "seen":
            for i, (u, v, _) in enumerate(dataset.pairs):
                (test if assignment[i] == f else train).append(i)
            train_drugs = {d for i in train for d in dataset.pairs[i][:2]}
            held = frozenset()
        else:
            held = frozenset(d for d in drugs if assignment.get(d) == f)
            want = 1 if setting == "one-unseen" else 2
            for i, (u, v, _) in enumerate(dataset.pairs):
                inside = (u in held) + (v in held)
                if inside == 0:
                    train.append(i)
                elif inside == want:
                    test.append(i)
            train_drugs = {d for i in train for d in dataset.pairs[i][:2]}
        folds.append(Fold(train, test, frozenset(train_drugs), held))
    return SplitPlan(setting, k, dict(assignment), folds)


def audit_split(plan: SplitPlan, dataset: PairDataset, drugs: Sequence[str] | None = None) -> None:
    """Raise :class:`LeakageError` if any split invariant is violated."""
    problems = []
    if plan.setting == "seen":
        if sorted(plan.assignment) != list(range(len(dataset))):
            problems.append("pair fold assignment is not a partition of the pairs")
    elif drugs is not None:
        if set(plan.assignment) != set(drugs):
            problems.append("drug fold assignment is not a partition of the drugs")
    for f, fold in enumerate(plan.folds):
        train, test = set(fold.train_pairs), set(fold.test_pairs)
        if train & test:
            problems.append(f"fold {f}: {len(train & test)} pairs are both train and test")
        for i in fold.train_pairs:
            u, v, _ = dataset.pairs[i]
            if u in fold.held_out or v in fold.held_out:
                problems.append(f"fold {f}: train pair {i} ({u}, {v}) contains a held-out drug")
        if plan.setting == "seen":
            continue
        want = 1 if plan.setting == "one-unseen" else 2
        for i in fold.test_pairs:
            u, v, _ = dataset.pairs[i]
            inside = (u in fold.held_out) + (v in fold.held_out)
            if inside != want:
                problems.append(f"fold {f}: test pair {i} has {inside} held-out drugs, expected {want}")
        if fold.train_drugs & fold.held_out:
            problems.append(f"fold {f}: held-out drugs appear in the train-drug set")
    if problems:
        raise LeakageError("split audit failed:\n  " + "\n  ".join(problems[:20]))


def write_split(plan: SplitPlan, path) -> None:
    items = sorted(plan.assignment.items(), key=lambda kv: (kv[1], str(kv[0]) if plan.setting != "seen" else kv[0]))
    _write_text(path, [f"{f}\t{key}" for key, f in items])


def parse_split(path, dataset: PairDataset, drugs: Sequence[str], setting: str) -> SplitPlan:
    _check_setting(setting)
    assignment: dict = {}
    for n, line in _read_lines(path):
        fields = line.split("\t")
        if len(fields) != 2:
            raise ParseError(f"expected 2 tab-separated fields, got {len(fields)}", path, n)
        try:
            fold = int(fields[0])
            key = int(fields[1]) if setting == "seen" else fields[1]
        except ValueError as exc:
            raise ParseError(str(exc), path, n) from None
        assignment[key] = fold
    k = max(assignment.values()) + 1 if assignment else 0
    if k < 2:
        raise ConfigError(f"split file {path} defines {k} folds; need at least 2")
    if setting != "seen":
        missing = [d for d in drugs if d not in assignment]
        if missing:
            raise ConfigError(f"split file {path} leaves {len(missing)} drugs unassigned, e.g. {missing[0]}")
    return plan_from_assignment(dataset, drugs, setting, k, assignment)


# -- benchmark bundle -----------------------------------------------------------

@dataclass
class Benchmark:
    """Everything one experiment reads: channels, prompts, labelled pairs."""

    channels: dict[str, TripleChannel]
    prompts: PromptEmbeddingSet
    dataset: PairDataset
    drugs: list[str]
    latent: dict[str, int] = field(default_factory=dict)
    label_table: np.ndarray | None = None


TRIPLE_FILES = {m: f"{m}.triples" for m in MODALITIES}
PAIRS_FILE = "pairs.txt"
PROMPTS_FILE = "prompts.tsv"
LATENT_FILE = "latent.tsv"


def split_filename(setting: str) -> str:
    return "split_seen.tsv" if setting == "seen" else "split_unseen.tsv"


def load_benchmark(data_dir, n_events: int | None = None) -> Benchmark:
    """Load a directory written by :func:`write_benchmark` (or hand-assembled)."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise ConfigError(f"data directory {data_dir} does not exist")
    dataset = parse_pairs(data_dir / PAIRS_FILE, n_events)
    channels = {}
    for mod, fname in TRIPLE_FILES.items():
        if (data_dir / fname).exists():
            channels[mod] = parse_triples(data_dir / fname, mod)
    prompts = parse_prompt_embeddings(data_dir / PROMPTS_FILE) if (data_dir / PROMPTS_FILE).exists() \
        else PromptEmbeddingSet()
    drugs = sorted(set(dataset.drugs()).union(*[c.drug_vocab for c in channels.values()]))
    latent = {}
    if (data_dir / LATENT_FILE).exists():
        for _, line in _read_lines(data_dir / LATENT_FILE):
            d, a = line.split("\t")
            latent[d] = int(a)
    return Benchmark(channels, prompts, dataset, drugs, latent)


def write_benchmark(bench: Benchmark, out_dir, folds: int = 10, seed: int = 0) -> None:
    """Write triples, pairs, prompts and default split files into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for mod, ch in bench.channels.items():
        write_triples(ch, out / TRIPLE_FILES[mod])
    write_pairs(bench.dataset, out / PAIRS_FILE)
    write_prompt_embeddings(bench.prompts, out / PROMPTS_FILE)
    if bench.latent:
        _write_text(out / LATENT_FILE, [f"{d}\t{a}" for d, a in bench.latent.items()])
    k_unseen = min(folds, len(bench.drugs))
    write_split(make_split(bench.dataset, bench.drugs, "both-unseen", k_unseen, seed), out / split_filename("both-unseen"))
    k_seen = min(folds, len(bench.dataset))
    if k_seen >= 2:
        write_split(make_split(bench.dataset, bench.drugs, "seen", k_seen, seed), out / split_filename("seen"))


# -- synthetic generator --------------------------------------------------------

@dataclass
class SyntheticConfig:
    drugs: int = 50
    events: int = 8
    pairs: int = 600
    bio_entities: int = 40
    bio_relations: int = 6
    sub_entities: int = 30
    lm_dim: int = 32
    planted_rule: bool = True
    noise: float = 0.15


def _n_clusters(events: int) -> int:
    """Smallest A with A(A+1)/2 unordered cluster pairs >= events."""
    a = 1
    while a * (a + 1) // 2 < events:
        a += 1
    return a


def generate_synthetic(config: SyntheticConfig, seed: int) -> Benchmark:
    """Desk-scale benchmark with three channels and per-modality prompt vectors.

    Every drug belongs to a latent cluster.  Its biological-relation targets
    and substructures are drawn mostly from cluster-specific entity pools, and
    its prompt vectors sit near a cluster centroid, so the cluster is
    observable from the channels.  With ``planted_rule`` the event of a pair is
    a fixed symmetric table lookup on the two clusters; otherwise labels are
    uniform noise.
    """
    c = config
    if c.drugs < 2 or c.events < 2:
        raise ConfigError(f"need >= 2 drugs and >= 2 events (got drugs={c.drugs}, events={c.events})")
    max_pairs = c.drugs * (c.drugs - 1) // 2
    if not 1 <= c.pairs <= max_pairs:
        raise ConfigError(f"{c.pairs} pairs is infeasible for {c.drugs} drugs (max {max_pairs})")
    n_clusters = _n_clusters(c.events)
    if min(c.bio_entities, c.sub_entities) < n_clusters or c.bio_relations < 1 or c.lm_dim < 1:
        raise ConfigError(f"entity pools must hold >= {n_clusters} entities per channel and lm_dim >= 1")
    rng = np.random.default_rng(seed)
    width = max(3, len(str(c.drugs - 1)))
    drugs = [f"DB{i:0{width}d}" for i in range(c.drugs)]
    cluster = np.arange(c.drugs) % n_clusters
    rng.shuffle(cluster)
    latent = {d: int(a) for d, a in zip(drugs, cluster)}

    # symmetric cluster-pair -> event table covering every event class
    cells = [(a, b) for a in range(n_clusters) for b in range(a, n_clusters)]
    values = np.concatenate([np.arange(c.events), rng.integers(0, c.events, len(cells) - c.events)])
    rng.shuffle(values)
    table = np.zeros((n_clusters, n_clusters), dtype=np.int64)
    for (a, b), y in zip(cells, values):
        table[a, b] = table[b, a] = y

    # entity pools
    bio_owner = np.arange(c.bio_entities) % n_clusters
    sub_owner = np.arange(c.sub_entities) % n_clusters
    bio_rel_of = rng.integers(0, c.bio_relations, c.bio_entities)
    bio_names = [f"P{j:03d}" for j in range(c.bio_entities)]
    rel_names = [f"function_{r}" for r in range(c.bio_relations)]

    def draw(owner: np.ndarray, a: int, count: int) -> list[int]:
        pool = np.flatnonzero(owner == a)
        other = np.flatnonzero(owner != a)
        picks = []
        for _ in range(count):
            src = other if (len(other) and rng.random() < c.noise) else pool
            picks.append(int(rng.choice(src)))
        return sorted(set(picks))

    bio_records, sub_records = [], []
    bio_links: dict[str, list[int]] = {}
    sub_links: dict[str, list[int]] = {}
    for d in drugs:
        a = latent[d]
        bio_links[d] = draw(bio_owner, a, int(rng.integers(2, 6)))
        sub_links[d] = draw(sub_owner, a, int(rng.integers(3, 8)))
        bio_records += [(d, bio_names[j], rel_names[bio_rel_of[j]]) for j in bio_links[d]]
        sub_records += [(d, str(j), "include") for j in sub_links[d]]

    # labelled pairs
    flat = rng.choice(max_pairs, size=c.pairs, replace=False)
    iu, ju = np.triu_indices(c.drugs, k=1)
    pairs = []
    for p in flat:
        u, v = drugs[iu[p]], drugs[ju[p]]
        if rng.random() < 0.5:
            u, v = v, u
        y = int(table[latent[u], latent[v]]) if c.planted_rule else int(rng.integers(0, c.events))
        pairs.append((u, v, y))
    dataset = PairDataset(pairs, c.events)
    ddi_records = []
    for u, v, y in pairs:
        ddi_records += [(u, v, f"event_{y}"), (v, u, f"event_{y}")]

    channels = {
        "biorel": channel_from_records("biorel", bio_records),
        "molsub": channel_from_records("molsub", sub_records),
        "ddigraph": channel_from_records("ddigraph", ddi_records),
    }

    # prompt vectors: index 0 is the drug-identity prompt, then one per triple
    centroids = rng.normal(0.0, 1.0, (n_clusters, c.lm_dim))
    bio_vecs = centroids[bio_owner] + 0.3 * rng.normal(size=(c.bio_entities, c.lm_dim))
    sub_vecs = centroids[sub_owner] + 0.3 * rng.normal(size=(c.sub_entities, c.lm_dim))
    drug_vecs = rng.normal(0.0, 1.0, (c.drugs, c.lm_dim))
    ddi_partners: dict[str, list[str]] = {}
    for u, v, _ in pairs:
        ddi_partners.setdefault(u, []).append(v)
        ddi_partners.setdefault(v, []).append(u)
    index_of = {d: i for i, d in enumerate(drugs)}

    def noisy(base: np.ndarray) -> np.ndarray:
        return base + 0.1 * rng.normal(size=base.shape)

    vectors = {}
    for i, d in enumerate(drugs):
        ident = drug_vecs[i]
        vectors[(d, "biorel")] = np.stack([noisy(ident)] + [noisy(bio_vecs[j]) for j in bio_links[d]])
        vectors[(d, "molsub")] = np.stack([noisy(ident)] + [noisy(sub_vecs[j]) for j in sub_links[d]])
        partners = ddi_partners.get(d, [])
        vectors[(d, "ddigraph")] = np.stack(
            [noisy(ident)] + [noisy(drug_vecs[index_of[p]] + 0.3 * centroids[latent[d]]) for p in partners]
        )
    prompts = PromptEmbeddingSet(vectors)
    return Benchmark(channels, prompts, dataset, drugs, latent, table)


def lookup_oracle_accuracy(bench: Benchmark, pair_ids: Sequence[int]) -> float:
    """Accuracy of a (cluster_u, cluster_v) -> label table fitted on ``pair_ids`` itself."""
    table: dict[tuple[int, int], int] = {}
    pairs = [bench.dataset.pairs[i] for i in pair_ids]
    for u, v, y in pairs:
        table.setdefault(tuple(sorted((bench.latent[u], bench.latent[v]))), y)
    hits = sum(table[tuple(sorted((bench.latent[u], bench.latent[v])))] == y for u, v, y in pairs)
    return hits / max(len(pairs), 1)


__all__ = [
    "SEP", "SELF_PAIR", "SETTINGS", "MODALITIES", "TripleChannel", "PromptEmbeddingSet",
    "PairDataset", "SplitPlan", "Fold", "Benchmark", "SyntheticConfig", "parse_triples",
    "write_triples", "channel_from_records", "sample_neighbors", "neighbor_table",
    "parse_prompt_embeddings", "write_prompt_embeddings", "parse_pairs", "write_pairs",
    "make_split", "plan_from_assignment", "audit_split", "write_split", "parse_split",
    "generate_synthetic", "load_benchmark", "write_benchmark", "lookup_oracle_accuracy",
    "split_filename",
]
