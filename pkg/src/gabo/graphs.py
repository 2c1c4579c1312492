"""Graph data model, JSON-Lines format, dataset splits, synthetic generator.

Scaffold group IDs are consumed from input files, never computed here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import features

# ogbg-molhiv atom-field cardinalities, used when a file has no header
DEFAULT_VOCAB = (119, 4, 12, 12, 10, 6, 6, 2, 2)
NUM_NODE_FIELDS = 9

# field 8 is the is-in-ring style flag the synthetic motif marks
RING_FIELD = 8
RING_CODE = 1


class GraphError(ValueError):
    """Malformed graph data or dataset file."""


@dataclass
class MolGraph:
    """Undirected node-feature graph with a binary label.

    ``edges`` holds both directions of every undirected edge, sorted
    lexicographically, so aggregation order never depends on file order.
    """

    num_nodes: int
    node_feats: np.ndarray          # (num_nodes, 9) int64 categorical codes
    edges: np.ndarray               # (num_directed_edges, 2) int64
    label: int
    scaffold_id: int | None = None
    classic_feats: np.ndarray | None = None

    def undirected_edges(self) -> list[tuple[int, int]]:
        """Each undirected edge once, as (min, max) pairs."""
        seen = set()
        for u, v in self.edges:
            seen.add((min(int(u), int(v)), max(int(u), int(v))))
        return sorted(seen)

    def __eq__(self, other):
        return (isinstance(other, MolGraph)
                and self.num_nodes == other.num_nodes
                and np.array_equal(self.node_feats, other.node_feats)
                and np.array_equal(self.edges, other.edges)
                and self.label == other.label
                and self.scaffold_id == other.scaffold_id)


def make_graph(num_nodes, node_feats, undirected_edges, label, scaffold_id=None,
               vocab=DEFAULT_VOCAB) -> MolGraph:
    """Validate fields and build a MolGraph with mirrored, sorted edges."""
    feats = np.asarray(node_feats, dtype=np.int64)
    if feats.shape != (num_nodes, NUM_NODE_FIELDS):
        raise GraphError(f"node_feats shape {feats.shape} does not match "
                         f"{num_nodes} nodes x {NUM_NODE_FIELDS} fields")
    for k in range(NUM_NODE_FIELDS):
        col = feats[:, k]
        if col.size and (col.min() < 0 or col.max() >= vocab[k]):
            bad = int(np.argmax((col < 0) | (col >= vocab[k])))
            raise GraphError(f"node {bad} field {k} code {col[bad]} outside "
                             f"vocabulary size {vocab[k]}")
    if label not in (0, 1):
        raise GraphError(f"label must be 0 or 1, got {label!r}")
    directed = set()
    for u, v in undirected_edges:
        u, v = int(u), int(v)
        if not (0 <= u < num_nodes and 0 <= v < num_nodes):
            raise GraphError(f"edge ({u}, {v}) has endpoint outside {num_nodes} nodes")
        directed.add((u, v))
        directed.add((v, u))
    edges = np.array(sorted(directed), dtype=np.int64).reshape(-1, 2)
    return MolGraph(num_nodes=num_nodes, node_feats=feats, edges=edges,
                    label=int(label), scaffold_id=scaffold_id)


# ---------------------------------------------------------------------------
# JSON-Lines format


def load_jsonl(path, vocab=None) -> list[MolGraph]:
    """Parse and validate a dataset file; errors carry 1-based line numbers."""
    graphs = []
    vocab = tuple(vocab) if vocab is not None else None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise GraphError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            if "header" in rec:
                if graphs or (vocab is not None and lineno > 1):
                    raise GraphError(f"line {lineno}: header must be the first line")
                sizes = rec["header"].get("vocab_sizes")
                if sizes is not None:
                    if len(sizes) != rec["header"].get("num_node_fields", len(sizes)):
                        raise GraphError(f"line {lineno}: header field count mismatch")
                    vocab = tuple(int(s) for s in sizes)
                continue
            try:
                g = make_graph(
                    num_nodes=rec["n"],
                    node_feats=rec["x"],
                    undirected_edges=rec["edges"],
                    label=rec["y"],
                    scaffold_id=rec.get("scaffold"),
                    vocab=vocab or DEFAULT_VOCAB,
                )
            except KeyError as exc:
                raise GraphError(f"line {lineno}: missing field {exc}") from exc
            except GraphError as exc:
                raise GraphError(f"line {lineno} (graph {len(graphs)}): {exc}") from exc
            graphs.append(g)
    return graphs


def save_jsonl(graphs, path, vocab=DEFAULT_VOCAB, write_header=True):
    """Write graphs with each undirected edge listed once."""
    with open(path, "w", encoding="utf-8") as fh:
        if write_header:
            header = {"header": {"num_node_fields": NUM_NODE_FIELDS,
                                 "vocab_sizes": list(vocab)}}
            fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for g in graphs:
            rec = {"n": g.num_nodes,
                   "x": g.node_feats.tolist(),
                   "edges": [list(e) for e in g.undirected_edges()],
                   "y": g.label}
            if g.scaffold_id is not None:
                rec["scaffold"] = g.scaffold_id
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def ensure_classic_features(graphs, standardized=False):
    """Compute and cache the 4-column classic feature matrix on each graph."""
    for g in graphs:
        if g.classic_feats is None:
            feats = features.classic_features(g)
            g.classic_feats = features.standardize(feats) if standardized else feats
    return graphs


# ---------------------------------------------------------------------------
# splits


@dataclass
class DatasetSplit:
    """Four disjoint index lists covering the dataset."""

    train: list[int]
    pseudo_val: list[int]
    val: list[int]
    test: list[int]
    degenerate: bool = False    # set when group structure forced empty splits

    def parts(self):
        return (self.train, self.pseudo_val, self.val, self.test)

    def as_dict(self):
        return {"train": self.train, "pseudo_val": self.pseudo_val,
                "val": self.val, "test": self.test, "degenerate": self.degenerate}


DEFAULT_FRACTIONS = (0.72, 0.08, 0.10, 0.10)


def _check_fractions(fractions):
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 4 or any(f <= 0 for f in fractions):
        raise ValueError(f"need four positive fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions sum to {sum(fractions)}, expected 1")
    return fractions


def _largest_remainder_sizes(n, fractions):
    raw = [f * n for f in fractions]
    base = [int(np.floor(r)) for r in raw]
    rest = n - sum(base)
    order = sorted(range(4), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:rest]:
        base[i] += 1
    return base


def split_random(graphs, fractions=DEFAULT_FRACTIONS, seed=0) -> DatasetSplit:
    """Plain shuffle into four parts; sizes by largest-remainder rounding."""
    fractions = _check_fractions(fractions)
    n = len(graphs)
    if n < 4:
        raise ValueError(f"need at least 4 graphs to split, got {n}")
    sizes = _largest_remainder_sizes(n, fractions)
    perm = np.random.default_rng(seed).permutation(n)
    bounds = np.cumsum([0] + sizes)
    parts = [sorted(int(i) for i in perm[bounds[k]:bounds[k + 1]]) for k in range(4)]
    return DatasetSplit(*parts)


def split_scaffold(graphs, fractions=DEFAULT_FRACTIONS, seed=0) -> DatasetSplit:
    """Whole scaffold groups assigned largest-first to the most under-filled split."""
    fractions = _check_fractions(fractions)
    n = len(graphs)
    if n < 4:
        raise ValueError(f"need at least 4 graphs to split, got {n}")
    missing = [i for i, g in enumerate(graphs) if g.scaffold_id is None]
    if missing:
        raise ValueError(f"graphs without scaffold_id: {missing}")
    groups: dict[int, list[int]] = {}
    for i, g in enumerate(graphs):
        groups.setdefault(g.scaffold_id, []).append(i)
    # shuffle group order before the size sort so equal-size ties vary by seed
    ids = list(groups)
    np.random.default_rng(seed).shuffle(ids)
    ids.sort(key=lambda gid: -len(groups[gid]))
    targets = [f * n for f in fractions]
    filled = [0, 0, 0, 0]
    parts = [[], [], [], []]
    for gid in ids:
        deficits = [targets[k] - filled[k] for k in range(4)]
        k = max(range(4), key=lambda j: (deficits[j], -j))
        parts[k].extend(groups[gid])
        filled[k] += len(groups[gid])
    parts = [sorted(p) for p in parts]
    degenerate = any(len(p) == 0 for p in parts)
    return DatasetSplit(*parts, degenerate=degenerate)


# ---------------------------------------------------------------------------
# synthetic motif dataset


def detect_marked_ring(graph, min_len=5) -> bool:
    """True iff the graph has a simple cycle of length >= min_len whose
    nodes all carry the marked ring code."""
    marked = graph.node_feats[:, RING_FIELD] == RING_CODE
    nodes = np.flatnonzero(marked)
    if len(nodes) < min_len:
        return False
    keep = set(int(v) for v in nodes)
    adj = {v: [] for v in keep}
    for u, v in graph.edges:
        if int(u) in keep and int(v) in keep and u != v:
            adj[int(u)].append(int(v))

    def dfs(start, v, visited):
        for w in adj[v]:
            if w == start and len(visited) >= min_len:
                return True
            if w > start and w not in visited:
                visited.add(w)
                if dfs(start, w, visited):
                    return True
                visited.discard(w)
        return False

    # anchor each candidate cycle at its smallest node to avoid re-walks
    return any(dfs(s, s, {s}) for s in sorted(keep))


# template table: scaffold_id is the index into this list
_TEMPLATES = (
    ("ring", 5), ("ring", 6), ("ring", 7),
    ("ring_pendant", 5), ("ring_pendant", 6),
    ("path", 5), ("path", 6), ("path", 7),
    ("sparse_marks", 3), ("no_marks", 0),
)
_POSITIVE_TEMPLATES = tuple(i for i, (k, _) in enumerate(_TEMPLATES) if k.startswith("ring"))
_NEGATIVE_TEMPLATES = tuple(i for i, (k, _) in enumerate(_TEMPLATES) if not k.startswith("ring"))


def _random_codes(rng, n, vocab=DEFAULT_VOCAB):
    codes = np.zeros((n, NUM_NODE_FIELDS), dtype=np.int64)
    for k in range(NUM_NODE_FIELDS):
        hi = min(int(vocab[k]), 6)
        codes[:, k] = rng.integers(0, hi, size=n)
    codes[:, RING_FIELD] = 0
    return codes


def _build_from_template(template_id, n, rng) -> MolGraph:
    kind, size = _TEMPLATES[template_id]
    n = max(n, size + 2)
    codes = _random_codes(rng, n)
    edges = []

    if kind in ("ring", "ring_pendant"):
        for i in range(size):
            edges.append((i, (i + 1) % size))
        codes[:size, RING_FIELD] = RING_CODE
        anchor_pool = list(range(size))
        if kind == "ring_pendant" and size + 1 < n:
            # a marked pendant hanging off the ring
            codes[size, RING_FIELD] = RING_CODE
    elif kind == "path":
        for i in range(size - 1):
            edges.append((i, i + 1))
        codes[:size, RING_FIELD] = RING_CODE
        anchor_pool = list(range(size))
    elif kind == "sparse_marks":
        marked = rng.choice(n, size=min(size, n), replace=False)
        codes[marked, RING_FIELD] = RING_CODE
        anchor_pool = [0]
        # small backbone cycle of unmarked nodes so negatives also have rings
        if n >= size + 4:
            base = [i for i in range(n) if codes[i, RING_FIELD] == 0][:4]
            for a, b in zip(base, base[1:] + base[:1]):
                edges.append((a, b))
            anchor_pool = base
    else:
        anchor_pool = [0]

    attached = set(anchor_pool) | {u for e in edges for u in e}
    if not attached:
        attached = {0}
    for v in range(n):
        if v not in attached:
            edges.append((int(rng.choice(sorted(attached))), v))
            attached.add(v)
    # a few extra edges for density, avoiding marked-marked shortcuts that
    # would close accidental marked cycles too often
    extra = int(rng.integers(1, 3))
    for _ in range(extra):
        u, v = rng.choice(n, size=2, replace=False)
        if codes[u, RING_FIELD] == RING_CODE and codes[v, RING_FIELD] == RING_CODE:
            continue
        edges.append((int(u), int(v)))

    g = make_graph(n, codes, edges, label=0, scaffold_id=template_id)
    g.label = int(detect_marked_ring(g))
    return g


def synth_motif_dataset(n_graphs, nodes_range=(10, 18), label_rule="marked_ring",
                        noise_rate=0.0, seed=0, max_retries=20) -> list[MolGraph]:
    """Random sparse connected graphs labeled by the marked-ring motif.

    Labels are flipped with probability ``noise_rate``; generation retries
    with a salted seed until the class balance lands in [0.3, 0.7].
    """
    if not 0.0 <= noise_rate < 0.5:
        raise ValueError(f"noise_rate {noise_rate} outside [0, 0.5)")
    if label_rule != "marked_ring":
        raise ValueError(f"unknown label_rule {label_rule!r}")
    if n_graphs == 0:
        return []
    lo, hi = nodes_range
    for attempt in range(max_retries):
        rng = np.random.default_rng([seed, attempt])
        graphs = []
        for _ in range(n_graphs):
            if rng.random() < 0.5:
                tid = int(rng.choice(_POSITIVE_TEMPLATES))
            else:
                tid = int(rng.choice(_NEGATIVE_TEMPLATES))
            n = int(rng.integers(lo, hi + 1))
            g = _build_from_template(tid, n, rng)
            if noise_rate > 0 and rng.random() < noise_rate:
                g.label = 1 - g.label
            graphs.append(g)
        balance = sum(g.label for g in graphs) / n_graphs
        if 0.3 <= balance <= 0.7:
            return graphs
    raise RuntimeError(f"could not reach class balance in [0.3, 0.7] "
                       f"after {max_retries} attempts")


# ---------------------------------------------------------------------------
# batching


@dataclass
class GraphBatch:
    """Concatenated graphs with per-node graph membership."""

    node_feats: np.ndarray       # (total_nodes, 9)
    edge_src: np.ndarray         # (total_directed_edges,)
    edge_dst: np.ndarray
    membership: np.ndarray       # (total_nodes,) graph index per node
    labels: np.ndarray           # (num_graphs, 1) float64
    num_graphs: int
    num_nodes: int
    node_counts: np.ndarray      # (num_graphs,)
    classic_feats: np.ndarray | None = None
    graphs: list = field(default_factory=list)


def batch_graphs(graphs) -> GraphBatch:
    if not graphs:
        return GraphBatch(node_feats=np.zeros((0, NUM_NODE_FIELDS), dtype=np.int64),
                          edge_src=np.zeros(0, dtype=np.int64),
                          edge_dst=np.zeros(0, dtype=np.int64),
                          membership=np.zeros(0, dtype=np.int64),
                          labels=np.zeros((0, 1)), num_graphs=0, num_nodes=0,
                          node_counts=np.zeros(0, dtype=np.int64))
    feats, srcs, dsts, members = [], [], [], []
    offset = 0
    counts = []
    have_classic = all(g.classic_feats is not None for g in graphs)
    classics = [] if have_classic else None
    for gi, g in enumerate(graphs):
        if g.num_nodes == 0:
            raise GraphError(f"graph {gi} in batch has zero nodes")
        feats.append(g.node_feats)
        if len(g.edges):
            srcs.append(g.edges[:, 0] + offset)
            dsts.append(g.edges[:, 1] + offset)
        members.append(np.full(g.num_nodes, gi, dtype=np.int64))
        if have_classic:
            classics.append(g.classic_feats)
        counts.append(g.num_nodes)
        offset += g.num_nodes
    return GraphBatch(
        node_feats=np.concatenate(feats, axis=0),
        edge_src=np.concatenate(srcs) if srcs else np.zeros(0, dtype=np.int64),
        edge_dst=np.concatenate(dsts) if dsts else np.zeros(0, dtype=np.int64),
        membership=np.concatenate(members),
        labels=np.array([[float(g.label)] for g in graphs]),
        num_graphs=len(graphs),
        num_nodes=offset,
        node_counts=np.array(counts, dtype=np.int64),
        classic_feats=np.concatenate(classics, axis=0) if have_classic else None,
        graphs=list(graphs),
    )
