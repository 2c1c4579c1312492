"""GIN + virtual node graph classifier, loss, metric, and checkpoints.

All forwards are functional: parameters come in as a ``Params`` bundle and
are never mutated, which is what lets the bilevel trainer differentiate
through whole optimizer steps.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Params, Tensor
from .graphs import DEFAULT_VOCAB, NUM_NODE_FIELDS


@dataclass
class GinClassifierConfig:
    embed_dim: int = 256
    num_layers: int = 5
    epsilon: float = 0.0
    train_epsilon: bool = False     # off by default; the update rule writes a fixed eps
    hidden_mult: int = 2
    vocab_sizes: tuple = DEFAULT_VOCAB


def _mlp_params(rng, prefix, dims, zero_last=False, last_gain=1.0):
    out = {}
    depth = len(dims) - 1
    for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:]), start=1):
        scale = 1.0 / np.sqrt(2.0 * fan_in)
        if zero_last and i == depth:
            w = np.zeros((fan_in, fan_out))
        else:
            gain = last_gain if i == depth else 1.0
            w = rng.standard_normal((fan_in, fan_out)) * scale * gain
        out[f"{prefix}_w{i}"] = Tensor(w)
        out[f"{prefix}_b{i}"] = Tensor(np.zeros((1, fan_out)))
    return out


def mlp_forward(params: Params, prefix: str, x: Tensor, depth: int = 2) -> Tensor:
    """linear -> relu -> ... -> linear over rank-2 input."""
    h = x
    for i in range(1, depth + 1):
        w, b = params[f"{prefix}_w{i}"], params[f"{prefix}_b{i}"]
        h = ad.add(ad.matmul(h, w), ad.broadcast_to(b, (h.shape[0], w.shape[1])))
        if i < depth:
            h = ad.relu(h)
    return h


def init_classifier_params(cfg: GinClassifierConfig, rng) -> Params:
    d = cfg.embed_dim
    hidden = cfg.hidden_mult * d
    items = {}
    for k, vsize in enumerate(cfg.vocab_sizes):
        items[f"atom_table_{k}"] = Tensor(rng.standard_normal((vsize, d)) / (3.0 * np.sqrt(d)))
    for l in range(cfg.num_layers):
        items.update(_mlp_params(rng, f"gin{l}", (d, hidden, d)))
    for l in range(cfg.num_layers - 1):
        # zero output layer: the virtual node starts as a no-op and learns in
        items.update(_mlp_params(rng, f"vn{l}", (d, hidden, d), zero_last=True))
    items["vn_init"] = Tensor(np.zeros((1, d)))
    items["head_w"] = Tensor(rng.standard_normal((d, 1)) / np.sqrt(d))
    items["head_b"] = Tensor(np.zeros((1, 1)))
    return Params(items)


def atom_encode(params: Params, node_feats: np.ndarray,
                vocab_sizes=DEFAULT_VOCAB) -> Tensor:
    """Sum of the nine per-field embedding rows for each node."""
    codes = np.asarray(node_feats, dtype=np.int64)
    for k in range(NUM_NODE_FIELDS):
        col = codes[:, k]
        if col.size and (col.min() < 0 or col.max() >= vocab_sizes[k]):
            bad = int(np.argmax((col < 0) | (col >= vocab_sizes[k])))
            raise ValueError(f"atom_encode: node {bad} field {k} code {col[bad]} "
                             f"outside vocabulary size {vocab_sizes[k]}")
    h = None
    for k in range(NUM_NODE_FIELDS):
        rows = ad.index_select(params[f"atom_table_{k}"], codes[:, k])
        h = rows if h is None else ad.add(h, rows)
    return h


def gin_layer(params: Params, prefix: str, h: Tensor, edge_src, edge_dst,
              epsilon: float = 0.0) -> Tensor:
    """h'_v = MLP((1 + eps) * h_v + sum of neighbor embeddings)."""
    n = h.shape[0]
    if len(edge_src):
        gathered = ad.index_select(h, edge_src)
        agg = ad.scatter_sum(gathered, edge_dst, n)
        combined = ad.add(ad.mul(h, Tensor(1.0 + epsilon)), agg)
    else:
        combined = ad.mul(h, Tensor(1.0 + epsilon))
    return mlp_forward(params, prefix, combined)


def virtual_node_pass(params: Params, prefix: str, h: Tensor, membership,
                      node_counts, vn_state: Tensor):
    """Aggregate nodes into the per-graph state, then broadcast it back.

    vn' = MLP(vn + sum_v h_v) per graph; every node then receives h_v + vn'.
    """
    num_graphs = len(node_counts)
    if h.shape[0] == 0 or num_graphs == 0:
        return h, vn_state
    pooled = ad.scatter_sum(h, membership, num_graphs)
    vn_new = mlp_forward(params, prefix, ad.add(vn_state, pooled))
    h_new = ad.add(h, ad.index_select(vn_new, membership))
    return h_new, vn_new


def readout_and_head(params: Params, h: Tensor, membership, node_counts) -> Tensor:
    """Mean-pool real nodes per graph and apply the linear head."""
    counts = np.asarray(node_counts, dtype=np.float64)
    if (counts <= 0).any():
        raise ValueError("readout: graph with zero nodes in batch")
    num_graphs = len(counts)
    summed = ad.scatter_sum(h, membership, num_graphs)
    inv = Tensor((1.0 / counts).reshape(-1, 1))
    pooled = ad.mul(summed, ad.broadcast_to(inv, summed.shape))
    logits = ad.add(ad.matmul(pooled, params["head_w"]),
                    ad.broadcast_to(params["head_b"], (num_graphs, 1)))
    return logits


def classify_from_embeddings(params: Params, cfg: GinClassifierConfig, h: Tensor,
                             batch) -> Tensor:
    """Run GIN layers (virtual-node passes between them) and the head."""
    vn = ad.broadcast_to(params["vn_init"], (batch.num_graphs, cfg.embed_dim))
    for l in range(cfg.num_layers):
        h = gin_layer(params, f"gin{l}", h, batch.edge_src, batch.edge_dst,
                      epsilon=cfg.epsilon)
        if l < cfg.num_layers - 1:
            h, vn = virtual_node_pass(params, f"vn{l}", h, batch.membership,
                                      batch.node_counts, vn)
    return readout_and_head(params, h, batch.membership, batch.node_counts)


def classifier_forward(params: Params, cfg: GinClassifierConfig, batch,
                       embed_transform=None) -> Tensor:
    """Full forward; ``embed_transform`` maps atom embeddings to augmented ones."""
    h = atom_encode(params, batch.node_feats, cfg.vocab_sizes)
    if embed_transform is not None:
        h = embed_transform(h)
    return classify_from_embeddings(params, cfg, h, batch)


def bce_loss(logits: Tensor, labels) -> Tensor:
    """Mean softplus-stabilized binary cross entropy.

    softplus(z) - z*y equals -log sigmoid(z) for y=1 and -log(1-sigmoid(z))
    for y=0.
    """
    y = labels if isinstance(labels, Tensor) else Tensor(np.asarray(labels, dtype=np.float64))
    vals = np.unique(y.data)
    if vals.size and not np.isin(vals, (0.0, 1.0)).all():
        raise ValueError(f"bce_loss: labels must be 0/1, got values {vals}")
    return ad.tmean(ad.sub(ad.softplus(logits), ad.mul(logits, y)))


def roc_auc(scores, labels) -> float:
    """Rank (Mann-Whitney) ROC-AUC; ties credited one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("roc_auc: need both classes present")
    ranks = _average_ranks(scores)
    pos_rank_sum = ranks[labels == 1].sum()
    n_pos, n_neg = len(pos), len(neg)
    u = pos_rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), dtype=np.float64)
    sorted_x = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


# ---------------------------------------------------------------------------
# checkpoints: flat float64 binary plus a JSON manifest


def save_checkpoint(param_sets: dict[str, Params], path_prefix: str):
    """Write ``<prefix>.bin`` and ``<prefix>.manifest.json``.

    ``param_sets`` maps a namespace (e.g. "classifier") to its Params.
    """
    entries = []
    blobs = []
    offset = 0
    for ns, params in param_sets.items():
        for name, t in params.items():
            arr = np.ascontiguousarray(t.data, dtype=np.float64)
            entries.append({"name": f"{ns}/{name}", "shape": list(arr.shape),
                            "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
    with open(f"{path_prefix}.bin", "wb") as fh:
        fh.write(b"".join(blobs))
    with open(f"{path_prefix}.manifest.json", "w", encoding="utf-8") as fh:
        json.dump({"dtype": "float64", "entries": entries}, fh, indent=1)


def load_checkpoint(path_prefix: str) -> dict[str, Params]:
    with open(f"{path_prefix}.manifest.json", "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    raw = np.fromfile(f"{path_prefix}.bin", dtype=np.float64)
    out: dict[str, Params] = {}
    for entry in manifest["entries"]:
        ns, name = entry["name"].split("/", 1)
        shape = tuple(entry["shape"])
        start = entry["offset"] // 8
        count = int(np.prod(shape)) if shape else 1
        arr = raw[start:start + count].reshape(shape)
        out.setdefault(ns, Params())[name] = Tensor(arr.copy())
    return out
