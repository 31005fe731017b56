"""Dataset ingestion, canonical splits, cross-validation folds and the
synthetic two-hop fixture.

The on-disk layout is a directory of plain text files:

    meta.json          {"n": ..., "classes": ..., "feature_dim": ...}
    features.csv       node_id,idx:val,...        (sparse rows; missing = zero row)
    labels.csv         node_id,class
    edges.tsv          src<TAB>dst<TAB>weight?    (one row per undirected edge)
    splits.json        {"train": [...], "val": [...], "test": [...]}   optional
    meta_measures.csv  node_id,<measure>,...                           optional
    betas.json         {measure: beta}                                 optional
"""

from __future__ import annotations

import json
import pickle
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from multihop.affinity import Measure, MetaTable
from multihop.graph import WeightedGraph


class DatasetFormatError(ValueError):
    """Schema violation in a dataset directory; message carries file/line."""


@dataclass
class Dataset:
    features: sp.csr_matrix | np.ndarray
    labels: np.ndarray
    graph: WeightedGraph | None = None
    meta: MetaTable | None = None
    splits: dict[str, np.ndarray] = field(default_factory=dict)
    name: str = ""
    split_provenance: str = "none"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=int)
        if self.labels.ndim != 1 or len(self.labels) != self.n:
            raise DatasetFormatError("labels must be one class id per node")
        if self.graph is not None and self.graph.n != self.n:
            raise DatasetFormatError(f"graph has {self.graph.n} nodes, features {self.n}")
        if self.meta is not None and self.meta.n != self.n:
            raise DatasetFormatError(f"meta table has {self.meta.n} nodes, features {self.n}")
        self._check_splits()

    def _check_splits(self) -> None:
        used = np.zeros(self.n, dtype=int)
        for name, mask in self.splits.items():
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (self.n,):
                raise DatasetFormatError(f"split {name!r} has wrong length")
            self.splits[name] = mask
            used += mask
        if (used > 1).any():
            raise DatasetFormatError("split masks overlap")
        if "train" in self.splits:
            present = np.unique(self.labels[self.splits["train"]])
            if len(present) != self.num_classes:
                raise DatasetFormatError("every class must appear in the train split")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def dense_features(self, cap_bytes: int = 512 * 2**20) -> np.ndarray:
        """Densify sparse features when the result fits under the cap."""
        if not sp.issparse(self.features):
            return self.features
        need = self.n * self.feature_dim * 8
        if need > cap_bytes:
            raise MemoryError(f"dense features need {need} bytes, cap is {cap_bytes}")
        return self.features.toarray()

    def content_hash(self) -> str:
        """Stable hash over features/labels/graph for report provenance."""
        import hashlib

        h = hashlib.sha256()
        dense = self.features.toarray() if sp.issparse(self.features) else np.asarray(self.features)
        h.update(np.ascontiguousarray(dense, dtype=np.float64).tobytes())
        h.update(self.labels.astype(np.int64).tobytes())
        if self.graph is not None:
            h.update(self.graph.to_json().encode())
        return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# portable directory format


def _err(path: Path, line: int | None, msg: str) -> DatasetFormatError:
    loc = f"{path}:{line}" if line is not None else str(path)
    return DatasetFormatError(f"{loc}: {msg}")


def load_dataset(path: str | Path) -> Dataset:
    """Read and validate a dataset directory."""
    root = Path(path)
    meta_file = root / "meta.json"
    if not meta_file.exists():
        raise _err(meta_file, None, "missing file")
    info = json.loads(meta_file.read_text())
    for key in ("n", "classes", "feature_dim"):
        if key not in info:
            raise _err(meta_file, None, f"missing key {key!r}")
    n, classes, fdim = int(info["n"]), int(info["classes"]), int(info["feature_dim"])

    feat_file = root / "features.csv"
    if not feat_file.exists():
        raise _err(feat_file, None, "missing file")
    rows, cols, vals = [], [], []
    seen_rows = set()
    for ln, line in enumerate(feat_file.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split(",")
        try:
            node = int(parts[0])
        except ValueError:
            raise _err(feat_file, ln, f"bad node id {parts[0]!r}")
        if not (0 <= node < n):
            raise _err(feat_file, ln, f"node id {node} out of range")
        if node in seen_rows:
            raise _err(feat_file, ln, f"repeated row for node {node}")
        seen_rows.add(node)
        for tok in parts[1:]:
            if not tok:
                continue
            try:
                idx, val = tok.split(":")
                idx, val = int(idx), float(val)
            except ValueError:
                raise _err(feat_file, ln, f"bad idx:val token {tok!r}")
            if not (0 <= idx < fdim):
                raise _err(feat_file, ln, f"feature index {idx} out of range")
            rows.append(node)
            cols.append(idx)
            vals.append(val)
    features = sp.csr_matrix((vals, (rows, cols)), shape=(n, fdim))

    label_file = root / "labels.csv"
    if not label_file.exists():
        raise _err(label_file, None, "missing file")
    labels = np.full(n, -1, dtype=int)
    for ln, line in enumerate(label_file.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            node_s, cls_s = line.split(",")
            node, cls = int(node_s), int(cls_s)
        except ValueError:
            raise _err(label_file, ln, f"bad row {line!r}")
        if not (0 <= node < n):
            raise _err(label_file, ln, f"node id {node} out of range")
        if not (0 <= cls < classes):
            raise _err(label_file, ln, f"class {cls} out of range [0,{classes})")
        if labels[node] != -1:
            raise _err(label_file, ln, f"repeated label for node {node}")
        labels[node] = cls
    if (labels == -1).any():
        missing = int(np.flatnonzero(labels == -1)[0])
        raise _err(label_file, None, f"no label for node {missing}")

    edge_file = root / "edges.tsv"
    if not edge_file.exists():
        raise _err(edge_file, None, "missing file")
    pairs: dict[tuple[int, int], float] = {}
    for ln, line in enumerate(edge_file.read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3):
            raise _err(edge_file, ln, f"expected src<TAB>dst[<TAB>weight], got {line!r}")
        try:
            src, dst = int(parts[0]), int(parts[1])
            w = float(parts[2]) if len(parts) == 3 else 1.0
        except ValueError:
            raise _err(edge_file, ln, f"bad edge row {line!r}")
        if src == dst:
            raise _err(edge_file, ln, f"self-loop on node {src}")
        if not (0 <= src < n and 0 <= dst < n):
            raise _err(edge_file, ln, f"edge ({src},{dst}) out of range")
        key = (min(src, dst), max(src, dst))
        if key in pairs:
            raise _err(edge_file, ln, f"duplicate edge ({src},{dst})")
        if w < 0:
            raise _err(edge_file, ln, f"negative weight {w}")
        pairs[key] = w
    graph = WeightedGraph(n, tuple((i, j, w) for (i, j), w in sorted(pairs.items()) if w > 0))

    splits: dict[str, np.ndarray] = {}
    provenance = "none"
    split_file = root / "splits.json"
    if split_file.exists():
        obj = json.loads(split_file.read_text())
        for name, ids in obj.items():
            mask = np.zeros(n, dtype=bool)
            ids = np.asarray(ids, dtype=int)
            if ids.size and (ids.min() < 0 or ids.max() >= n):
                raise _err(split_file, None, f"split {name!r} has out-of-range ids")
            mask[ids] = True
            splits[name] = mask
        provenance = "canonical-file"

    meta_table = None
    mm_file = root / "meta_measures.csv"
    if mm_file.exists():
        betas_file = root / "betas.json"
        betas = json.loads(betas_file.read_text()) if betas_file.exists() else {}
        lines = mm_file.read_text().splitlines()
        if not lines:
            raise _err(mm_file, 1, "empty measures file")
        header = lines[0].split(",")
        if header[0] != "node_id":
            raise _err(mm_file, 1, "header must start with node_id")
        names = header[1:]
        table = np.full((n, len(names)), np.nan)
        for ln, line in enumerate(lines[1:], 2):
            if not line.strip():
                continue
            parts = line.split(",")
            if len(parts) != len(header):
                raise _err(mm_file, ln, "wrong column count")
            node = int(parts[0])
            table[node] = [float(x) for x in parts[1:]]
        if np.isnan(table).any():
            raise _err(mm_file, None, "missing measure rows")
        meta_table = MetaTable(
            n,
            tuple(
                Measure(name, table[:, c], beta=float(betas.get(name, 0.0)))
                for c, name in enumerate(names)
            ),
        )

    return Dataset(
        features=features,
        labels=labels,
        graph=graph,
        meta=meta_table,
        splits=splits,
        name=str(info.get("name", root.name)),
        split_provenance=provenance,
    )


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """Write the portable directory format (inverse of load_dataset)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    (root / "meta.json").write_text(
        json.dumps(
            {"n": ds.n, "classes": ds.num_classes, "feature_dim": ds.feature_dim, "name": ds.name}
        )
    )
    csr = ds.features.tocsr() if sp.issparse(ds.features) else sp.csr_matrix(ds.features)
    lines = []
    for i in range(ds.n):
        row = csr.getrow(i)
        toks = [f"{idx}:{val:.17g}" for idx, val in zip(row.indices, row.data)]
        lines.append(",".join([str(i), *toks]))
    (root / "features.csv").write_text("\n".join(lines) + "\n")
    (root / "labels.csv").write_text(
        "\n".join(f"{i},{c}" for i, c in enumerate(ds.labels)) + "\n"
    )
    edges = ds.graph.edges if ds.graph is not None else ()
    (root / "edges.tsv").write_text(
        "".join(f"{i}\t{j}\t{w:.17g}\n" for i, j, w in edges)
    )
    if ds.splits:
        (root / "splits.json").write_text(
            json.dumps({k: np.flatnonzero(v).tolist() for k, v in ds.splits.items()})
        )
    if ds.meta is not None:
        names = [m.name for m in ds.meta.measures]
        rows = ["node_id," + ",".join(names)]
        for i in range(ds.n):
            rows.append(
                ",".join([str(i), *(f"{m.values[i]:.17g}" for m in ds.meta.measures)])
            )
        (root / "meta_measures.csv").write_text("\n".join(rows) + "\n")
        (root / "betas.json").write_text(
            json.dumps({m.name: m.beta for m in ds.meta.measures})
        )


# ---------------------------------------------------------------------------
# splits


def planetoid_split(ds: Dataset) -> Dataset:
    """Fixed benchmark split: 20 labeled nodes per class, 500 val, 1000 test.

    When the dataset carries canonical split files they win; otherwise the
    first 20 nodes of each class in node order go to train, the next 500
    unassigned nodes to validation and the following 1000 to test. The choice
    is recorded in ``split_provenance``.
    """
    if {"train", "val", "test"} <= set(ds.splits):
        return ds
    counts = np.bincount(ds.labels, minlength=ds.num_classes)
    short = np.flatnonzero(counts < 20)
    if short.size:
        raise DatasetFormatError(f"class {int(short[0])} has fewer than 20 nodes")
    train = np.zeros(ds.n, dtype=bool)
    taken = np.zeros(ds.num_classes, dtype=int)
    for i, c in enumerate(ds.labels):
        if taken[c] < 20:
            train[i] = True
            taken[c] += 1
    rest = np.flatnonzero(~train)
    if rest.size < 1500:
        raise DatasetFormatError("not enough unlabeled nodes for 500 val + 1000 test")
    val = np.zeros(ds.n, dtype=bool)
    test = np.zeros(ds.n, dtype=bool)
    val[rest[:500]] = True
    test[rest[500:1500]] = True
    return replace(
        ds,
        splits={"train": train, "val": val, "test": test},
        split_provenance="positional-20-per-class",
    )


def stratified_kfold(labels: np.ndarray, k: int = 10, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stratified fold masks; per-fold class counts within 1 of proportional."""
    labels = np.asarray(labels, dtype=int)
    if k < 2:
        raise ValueError("k must be >= 2")
    n = len(labels)
    counts = np.bincount(labels)
    tiny = np.flatnonzero(counts < k)
    if tiny.size:
        raise ValueError(f"class {int(tiny[0])} has {int(counts[tiny[0]])} members, needs >= {k}")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(n, dtype=int)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        fold_of[idx] = np.arange(len(idx)) % k
    out = []
    for f in range(k):
        test = fold_of == f
        out.append((~test, test))
    return out


# ---------------------------------------------------------------------------
# synthetic fixture: labels decodable only from exact-2-hop neighborhoods


def synth_twohop(n: int = 300, classes: int = 3, seed: int = 0) -> Dataset:
    """Planted dataset whose labels live beyond the 1-hop neighborhoods.

    Three node roles. "Readers" display no class token at all; their label is
    encoded by the "broadcaster" nodes they are wired to through private
    relay nodes (each reader gets a few same-label broadcasters plus one
    random bridge for connectivity). Broadcasters and relays display their
    own label in their features, which only a self-loop can read. Readers of
    the last class reach their broadcasters through two-relay chains, so
    their signal sits at hop distance exactly 3 while the other classes sit
    at exactly 2: branch usefulness is class-dependent, which is what an
    adaptive fusion layer can exploit and a fixed sum cannot.

    The strict 1-hop neighborhood of every node is label-uninformative (it
    consists of relays with unrelated labels, or of blank readers plus
    unrelated displays), so a linear 1-hop probe stays near chance.
    """
    if n < 50:
        raise ValueError("fixture needs n >= 50")
    if classes < 2:
        raise ValueError("need at least 2 classes")
    informants = 2  # signal paths per reader; one bridge arc is added on top
    for attempt in range(20):
        rng = np.random.default_rng((seed, attempt))
        ds = _try_synth_twohop(n, classes, informants, rng, seed)
        if ds is not None:
            return ds
    raise RuntimeError("could not generate a connected fixture; widen parameters")


def _try_synth_twohop(n, classes, informants, rng, seed) -> Dataset | None:
    deep = classes - 1  # the class whose signal sits at hop 3
    # relays per reader: shallow = informants + bridge, deep = 2*informants + bridge
    shallow_relays = informants + 1
    deep_relays = 2 * informants + 1
    avg_relays = ((classes - 1) * shallow_relays + deep_relays) / classes
    n_read = int(n // (2 + avg_relays))
    n_bcast = n_read
    if n_read < classes:
        return None
    # balanced label draws keep the majority-class baseline at chance
    y_read = _balanced_labels(n_read, classes, rng)
    y_bcast = y_read.copy()
    rng.shuffle(y_bcast)

    # arcs: (reader, broadcaster, relay_count); relay_count 2 puts the
    # broadcaster at hop distance 3 from the reader
    arcs: list[tuple[int, int, int]] = []
    for c in range(classes):
        readers_c = np.flatnonzero(y_read == c)
        pool = np.flatnonzero(y_bcast == c)
        rng.shuffle(pool)
        hops = 2 if c == deep else 1
        slot = 0
        # cyclic dealing wires every broadcaster in and keeps each class's
        # block connected before bridges
        for r in readers_c:
            for _ in range(informants):
                arcs.append((int(r), int(pool[slot % len(pool)]), hops))
                slot += 1
    for r in range(n_read):
        arcs.append((r, int(rng.integers(0, n_bcast)), 1))  # bridge arc
    # extra single-relay bridges to hit exactly n nodes
    used = n_read + n_bcast + sum(k for _, _, k in arcs)
    for _ in range(max(n - used, 0)):
        arcs.append((int(rng.integers(0, n_read)), int(rng.integers(0, n_bcast)), 1))

    total = n_read + n_bcast + sum(k for _, _, k in arcs)
    labels = np.zeros(total, dtype=int)
    labels[:n_read] = y_read
    labels[n_read : n_read + n_bcast] = y_bcast
    tokens = np.full(total, -1)  # -1 = no token displayed (readers)
    tokens[n_read : n_read + n_bcast] = y_bcast

    n_relay_total = total - n_read - n_bcast
    y_relay = _balanced_labels(n_relay_total, classes, rng)
    edges = []
    next_relay = n_read + n_bcast
    for r, b, k in arcs:
        chain = [r]
        for _ in range(k):
            w = next_relay
            next_relay += 1
            labels[w] = y_relay[w - n_read - n_bcast]
            tokens[w] = labels[w]
            chain.append(w)
        chain.append(n_read + b)
        for a, bnode in zip(chain[:-1], chain[1:]):
            edges.append((a, bnode, float(rng.uniform(0.5, 1.0))))
    graph = WeightedGraph.from_edges(total, edges)

    if not _connected(graph):
        return None

    noise_dims = 2
    feats = np.zeros((total, classes + noise_dims))
    shown = tokens >= 0
    feats[np.flatnonzero(shown), tokens[shown]] = 1.0
    feats[:, classes:] = rng.normal(0.0, 0.3, size=(total, noise_dims))

    splits = _stratified_fractions(labels, (0.6, 0.2, 0.2), rng)
    return Dataset(
        features=feats,
        labels=labels,
        graph=graph,
        splits={"train": splits[0], "val": splits[1], "test": splits[2]},
        name=f"synth-twohop-n{n}-c{classes}-s{seed}",
        split_provenance="synthetic-60/20/20",
    )


def _balanced_labels(count: int, classes: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.tile(np.arange(classes), count // classes + 1)[:count]
    rng.shuffle(labels)
    return labels


def _connected(g: WeightedGraph) -> bool:
    if g.n == 0:
        return True
    nbrs = g.adjacency_lists()
    seen = np.zeros(g.n, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        v = stack.pop()
        for u, _ in nbrs[v]:
            if not seen[u]:
                seen[u] = True
                stack.append(u)
    return bool(seen.all())


def _stratified_fractions(labels, fractions, rng) -> list[np.ndarray]:
    masks = [np.zeros(len(labels), dtype=bool) for _ in fractions]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        bounds = np.cumsum([int(round(f * len(idx))) for f in fractions])
        bounds[-1] = len(idx)
        lo = 0
        for m, hi in zip(masks, bounds):
            m[idx[lo:hi]] = True
            lo = hi
    return masks


def one_hop_probe_accuracy(ds: Dataset, epochs: int = 300, seed: int = 0) -> float:
    """Linear softmax probe on strictly-1-hop mean-aggregated features.

    Trained on the train split, scored on the test split. The fixture
    contract is that this stays near chance.
    """
    from multihop import nn

    adj = ds.graph.to_csr()
    deg = np.maximum(np.asarray(adj.sum(axis=1)).ravel(), 1.0)
    agg = sp.diags(1.0 / deg) @ adj  # row-mean over neighbors, no self-loop
    dense = ds.dense_features()
    x = np.asarray(agg @ dense)
    x = np.hstack([x, np.ones((len(x), 1))])  # bias column
    c = ds.num_classes
    rng = np.random.default_rng(seed)
    w = nn.Tensor2(rng.normal(0, 0.01, size=(x.shape[1], c)), requires_grad=True)
    state = nn.AdamState.init([w])
    train_mask = ds.splits["train"]
    for _ in range(epochs):
        w.grad = None
        loss = nn.masked_softmax_xent(nn.const_matmul(x, w), ds.labels, train_mask)
        nn.backward(loss)
        nn.adam_step([w], [w.grad], state, lr=0.05)
    logits = x @ w.values
    pred = logits.argmax(axis=1)
    test = ds.splits["test"]
    return float((pred[test] == ds.labels[test]).mean())


# ---------------------------------------------------------------------------
# converter for the published citation-benchmark distribution


def convert_planetoid(raw_dir: str | Path, name: str, out_dir: str | Path) -> Dataset:
    """Convert the upstream pickled citation files into the portable format.

    Reads ind.<name>.{y,tx,ty,allx,ally,graph,test.index} from raw_dir.
    The canonical fixed split (train = first labeled block, val = next 500,
    test = the test index file) is written to splits.json.
    """
    raw = Path(raw_dir)

    def load(part):
        p = raw / f"ind.{name}.{part}"
        if not p.exists():
            raise DatasetFormatError(f"{p}: missing file")
        with open(p, "rb") as fh:
            return pickle.load(fh, encoding="latin1")

    y, tx, ty, allx, ally = (load(p) for p in ("y", "tx", "ty", "allx", "ally"))
    graph_dict = load("graph")
    test_idx = np.loadtxt(raw / f"ind.{name}.test.index", dtype=int).reshape(-1)

    # tx row i holds the features of graph node test_idx[i]; the id range can
    # have holes (isolated unlabeled nodes), which stay as zero rows
    n = max(int(test_idx.max()) + 1, allx.shape[0] + tx.shape[0])
    features = sp.lil_matrix((n, allx.shape[1]))
    features[: allx.shape[0]] = allx.tolil()
    tx = sp.lil_matrix(tx)
    for row, node in enumerate(test_idx):
        features[int(node)] = tx[row]
    labels_onehot = np.zeros((n, ally.shape[1]))
    labels_onehot[: ally.shape[0]] = ally
    labels_onehot[test_idx] = ty
    labels = labels_onehot.argmax(axis=1)
    pairs = set()
    for src, nbrs in graph_dict.items():
        for dst in nbrs:
            if src == dst:
                continue
            pairs.add((min(src, dst), max(src, dst)))
    graph = WeightedGraph(n, tuple((i, j, 1.0) for i, j in sorted(pairs)))

    train_ids = list(range(y.shape[0]))
    val_count = min(500, max(allx.shape[0] - y.shape[0], 0))
    val_ids = list(range(y.shape[0], y.shape[0] + val_count))
    splits = {}
    for split_name, ids in (("train", train_ids), ("val", val_ids), ("test", test_idx.tolist())):
        mask = np.zeros(n, dtype=bool)
        mask[np.asarray(ids, dtype=int)] = True
        splits[split_name] = mask

    ds = Dataset(
        features=features.tocsr(),
        labels=labels,
        graph=graph,
        splits=splits,
        name=name,
        split_provenance="canonical-file",
    )
    save_dataset(ds, out_dir)
    return ds
