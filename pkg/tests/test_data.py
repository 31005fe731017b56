import json
import pickle

import numpy as np
import pytest
import scipy.sparse as sp

from multihop.affinity import Measure, MetaTable
from multihop.data import (
    Dataset,
    DatasetFormatError,
    convert_planetoid,
    load_dataset,
    one_hop_probe_accuracy,
    planetoid_split,
    save_dataset,
    stratified_kfold,
    synth_twohop,
)
from multihop.graph import WeightedGraph


def small_dataset(n=9, classes=3, with_meta=False, with_splits=True):
    rng = np.random.default_rng(5)
    features = sp.csr_matrix((rng.random((n, 4)) < 0.4) * rng.random((n, 4)))
    labels = np.arange(n) % classes
    edges = [(i, i + 1, 0.5 + 0.1 * i) for i in range(n - 1)]
    graph = WeightedGraph.from_edges(n, edges)
    splits = {}
    if with_splits:
        ids = np.arange(n)
        third = n // 3
        splits = {
            "train": ids < third,
            "val": (ids >= third) & (ids < 2 * third),
            "test": ids >= 2 * third,
        }
    meta = None
    if with_meta:
        meta = MetaTable(
            n,
            (
                Measure("age", rng.uniform(20, 80, n).round(1), beta=2.0),
                Measure("site", (np.arange(n) % 2).astype(float), beta=0.0),
            ),
        )
    return Dataset(features=features, labels=labels, graph=graph, meta=meta, splits=splits, name="tiny")


class TestRoundTrip:
    def test_save_load_identity(self, tmp_path):
        ds = small_dataset(with_meta=True)
        save_dataset(ds, tmp_path / "d")
        back = load_dataset(tmp_path / "d")
        assert back.n == ds.n and back.num_classes == ds.num_classes
        np.testing.assert_array_equal(back.labels, ds.labels)
        np.testing.assert_allclose(back.features.toarray(), ds.features.toarray())
        assert back.graph == ds.graph
        for split in ("train", "val", "test"):
            np.testing.assert_array_equal(back.splits[split], ds.splits[split])
        assert back.meta is not None
        for m_in, m_out in zip(ds.meta.measures, back.meta.measures):
            assert m_in.name == m_out.name and m_in.beta == m_out.beta
            np.testing.assert_allclose(m_in.values, m_out.values)

    def test_missing_labels_file_names_it(self, tmp_path):
        ds = small_dataset()
        save_dataset(ds, tmp_path / "d")
        (tmp_path / "d" / "labels.csv").unlink()
        with pytest.raises(DatasetFormatError, match="labels.csv"):
            load_dataset(tmp_path / "d")

    def test_duplicate_edge_rejected_with_line(self, tmp_path):
        ds = small_dataset()
        save_dataset(ds, tmp_path / "d")
        edges = (tmp_path / "d" / "edges.tsv").read_text()
        first = edges.splitlines()[0].split("\t")
        reversed_dup = f"{first[1]}\t{first[0]}\t{first[2]}\n"
        (tmp_path / "d" / "edges.tsv").write_text(edges + reversed_dup)
        with pytest.raises(DatasetFormatError, match="edges.tsv:9"):
            load_dataset(tmp_path / "d")

    def test_self_loop_rejected(self, tmp_path):
        ds = small_dataset()
        save_dataset(ds, tmp_path / "d")
        with open(tmp_path / "d" / "edges.tsv", "a") as fh:
            fh.write("3\t3\t1.0\n")
        with pytest.raises(DatasetFormatError, match="self-loop"):
            load_dataset(tmp_path / "d")

    def test_out_of_range_label_rejected(self, tmp_path):
        ds = small_dataset()
        save_dataset(ds, tmp_path / "d")
        labels = (tmp_path / "d" / "labels.csv").read_text().splitlines()
        labels[0] = "0,99"
        (tmp_path / "d" / "labels.csv").write_text("\n".join(labels) + "\n")
        with pytest.raises(DatasetFormatError, match="labels.csv:1"):
            load_dataset(tmp_path / "d")

    def test_overlapping_splits_rejected(self):
        with pytest.raises(DatasetFormatError, match="overlap"):
            ds = small_dataset()
            ds.splits["val"] = ds.splits["train"]
            ds._check_splits()


class TestPlanetoidSplit:
    def _shaped(self, n, classes):
        feats = sp.csr_matrix((n, 3))
        labels = np.arange(n) % classes
        return Dataset(features=feats, labels=labels, graph=WeightedGraph(n), name="shaped")

    def test_cora_shape_gives_140(self):
        ds = planetoid_split(self._shaped(2708, 7))
        assert int(ds.splits["train"].sum()) == 140
        assert int(ds.splits["val"].sum()) == 500
        assert int(ds.splits["test"].sum()) == 1000
        assert abs(140 / 2708 - 0.052) < 1e-3

    def test_citeseer_shape_gives_120(self):
        ds = planetoid_split(self._shaped(3327, 6))
        assert int(ds.splits["train"].sum()) == 120
        assert abs(120 / 3327 - 0.036) < 1e-3

    def test_pubmed_shape_gives_60(self):
        ds = planetoid_split(self._shaped(19717, 3))
        assert int(ds.splits["train"].sum()) == 60
        assert abs(60 / 19717 - 0.003) < 1e-3

    def test_small_class_rejected(self):
        with pytest.raises(DatasetFormatError):
            planetoid_split(self._shaped(100, 7))

    def test_existing_canonical_split_wins(self):
        ds = small_dataset()
        ds.split_provenance = "canonical-file"
        out = planetoid_split(ds)
        assert out is ds


class TestStratifiedKfold:
    def test_balanced_three_class_fold_counts(self):
        labels = np.arange(30) % 3
        folds = stratified_kfold(labels, k=10, seed=1)
        for train, test in folds:
            assert test.sum() == 3
            assert np.bincount(labels[test], minlength=3).tolist() == [1, 1, 1]

    def test_folds_disjoint_and_cover(self):
        labels = np.arange(47) % 4
        folds = stratified_kfold(labels, k=5, seed=2)
        total = np.zeros(47, dtype=int)
        for train, test in folds:
            assert not (train & test).any()
            total += test
        assert (total == 1).all()

    def test_deterministic_per_seed(self):
        labels = np.arange(40) % 4
        a = stratified_kfold(labels, k=10, seed=7)
        b = stratified_kfold(labels, k=10, seed=7)
        for (ta, sa), (tb, sb) in zip(a, b):
            np.testing.assert_array_equal(ta, tb)
            np.testing.assert_array_equal(sa, sb)

    def test_tiny_class_rejected(self):
        labels = np.array([0] * 20 + [1] * 3)
        with pytest.raises(ValueError):
            stratified_kfold(labels, k=10)

    def test_proportions_within_one_node(self):
        rng = np.random.default_rng(3)
        labels = rng.integers(0, 4, 103)
        if (np.bincount(labels) < 10).any():
            labels = np.arange(103) % 4
        folds = stratified_kfold(labels, k=10, seed=0)
        counts = np.bincount(labels)
        for _, test in folds:
            per_class = np.bincount(labels[test], minlength=len(counts))
            for c, got in enumerate(per_class):
                assert abs(got - counts[c] / 10) <= 1


class TestSynthTwohop:
    def test_connected_and_exact_size(self):
        ds = synth_twohop(300, 3, seed=0)
        assert ds.n == 300
        nbrs = ds.graph.adjacency_lists()
        seen = {0}
        stack = [0]
        while stack:
            v = stack.pop()
            for u, _ in nbrs[v]:
                if u not in seen:
                    seen.add(u)
                    stack.append(u)
        assert len(seen) == 300

    def test_deterministic_per_seed(self):
        a = synth_twohop(120, 3, seed=4)
        b = synth_twohop(120, 3, seed=4)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(np.asarray(a.features), np.asarray(b.features))
        assert a.graph == b.graph

    def test_split_fractions(self):
        ds = synth_twohop(300, 3, seed=1)
        assert abs(ds.splits["train"].sum() / 300 - 0.6) < 0.05
        assert abs(ds.splits["val"].sum() / 300 - 0.2) < 0.05
        assert abs(ds.splits["test"].sum() / 300 - 0.2) < 0.05
        total = ds.splits["train"] | ds.splits["val"] | ds.splits["test"]
        assert total.all()

    def test_one_hop_probe_near_chance(self):
        ds = synth_twohop(600, 3, seed=0)
        probe = one_hop_probe_accuracy(ds)
        assert abs(probe - 1 / 3) <= 0.10

    def test_minimum_size_enforced(self):
        with pytest.raises(ValueError):
            synth_twohop(20, 3, seed=0)


class TestConvertPlanetoid:
    def _fabricate(self, tmp_path, n_train=12, n_val_pool=10, n_test=8, classes=3, dim=6, hole=True):
        # builds a tiny upstream-format distribution, including an id hole in
        # the test range the way one real dataset has
        rng = np.random.default_rng(11)
        n_all = n_train + n_val_pool
        raw = tmp_path / "raw"
        raw.mkdir()
        allx = sp.csr_matrix(rng.random((n_all, dim)) * (rng.random((n_all, dim)) < 0.5))
        tx = sp.csr_matrix(rng.random((n_test, dim)))
        ally = np.eye(classes)[rng.integers(0, classes, n_all)]
        ty = np.eye(classes)[rng.integers(0, classes, n_test)]
        x = allx[:n_train]
        y = ally[:n_train]
        start = n_all
        ids = list(range(start, start + n_test + (1 if hole else 0)))
        if hole:
            ids.remove(start + 3)  # isolated unlabeled node in the range
        test_idx = np.array(ids)
        rng.shuffle(test_idx)
        total = start + n_test + (1 if hole else 0)
        graph = {i: [] for i in range(total)}
        for i in range(total - 1):
            graph[i].append(i + 1)
            graph[i + 1].append(i)
        for part, obj in (
            ("x", x), ("y", y), ("tx", tx), ("ty", ty), ("allx", allx), ("ally", ally), ("graph", graph),
        ):
            with open(raw / f"ind.toy.{part}", "wb") as fh:
                pickle.dump(obj, fh)
        np.savetxt(raw / "ind.toy.test.index", test_idx, fmt="%d")
        return raw, allx, tx, test_idx, total

    def test_convert_and_reload(self, tmp_path):
        raw, allx, tx, test_idx, total = self._fabricate(tmp_path)
        out = tmp_path / "portable"
        ds = convert_planetoid(raw, "toy", out)
        assert ds.n == total
        back = load_dataset(out)
        assert back.n == total
        assert back.split_provenance == "canonical-file"
        assert int(back.splits["train"].sum()) == 12
        assert int(back.splits["test"].sum()) == len(test_idx)
        # features of test nodes land at their graph ids
        dense = back.features.toarray()
        np.testing.assert_allclose(dense[test_idx[0]], tx.toarray()[0], atol=1e-12)
        np.testing.assert_allclose(dense[: allx.shape[0]], allx.toarray(), atol=1e-12)
