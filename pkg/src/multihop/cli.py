"""Command-line entry points.

Every experiment command reads a JSON config file plus flag overrides and
writes JSON reports / CSV tables; ``--figures`` additionally renders PNG
charts next to them. See README for the config schema.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from multihop import nn
from multihop.affinity import AffinityConfig, Measure, MetaTable, build_affinity, feature_edge_weights, meta_adjacency
from multihop.data import convert_planetoid, load_dataset, planetoid_split, synth_twohop
from multihop.graph import WeightedGraph, scaled_laplacian, sym_renormalize
from multihop.harness import (
    CvReport,
    RunReport,
    RunsReport,
    TrainConfig,
    cross_validate,
    prepare_graph,
    prepare_hops,
    repeated_runs,
    runs_csv,
    train_one,
)
from multihop.khop import build_khop, khop_oracle
from multihop.model import ModelConfig, build_model


def _read_json(path: str) -> dict:
    return json.loads(Path(path).read_text())


def _load_experiment(config_path: str, seed: int | None = None, data_dir: str | None = None):
    cfg = _read_json(config_path)
    dcfg = cfg.get("dataset", {})
    if "synth_twohop" in dcfg:
        ds = synth_twohop(**dcfg["synth_twohop"])
    elif data_dir or "path" in dcfg:
        ds = load_dataset(data_dir or dcfg["path"])
    else:
        raise SystemExit("config must name a dataset path or a synth_twohop block")
    if cfg.get("split") == "planetoid":
        ds = planetoid_split(ds)
    weighting = cfg.get("weighting")
    wcfg = None
    if weighting:
        wcfg = AffinityConfig(
            distance=weighting.get("distance", "correlation"),
            sigma=weighting.get("sigma"),
            betas=weighting.get("betas") or {},
        )
    ds, sigma = prepare_graph(ds, wcfg)
    mcfg = ModelConfig.from_dict(cfg["model"])
    tcfg = TrainConfig.from_dict(cfg.get("train", {}))
    if seed is not None:
        tcfg = replace(tcfg, seed=seed)
    extra = {}
    if weighting:
        extra["weighting"] = {**weighting, "sigma_used": sigma}
    return ds, mcfg, tcfg, extra


def cmd_train(args) -> int:
    ds, mcfg, tcfg, extra = _load_experiment(args.config, args.seed, args.data)
    if args.epochs_scale is not None:
        tcfg = replace(tcfg, epochs_scale=args.epochs_scale)
    hops = prepare_hops(ds, mcfg)
    report = train_one(
        ds, mcfg, tcfg, hops=hops, extra_config=extra, checkpoint_path=args.checkpoint
    )
    out = Path(args.out or "run_report.json")
    out.write_text(report.to_json())
    print(f"test accuracy {report.test_acc:.4f} (best val {report.best_val_acc:.4f}); report: {out}")
    if args.figures:
        from multihop import plots

        paths = plots.render_run_figures(report, args.figures, stem=out.stem)
        print("figures:", *[str(p) for p in paths])
    return 0


def cmd_runs(args) -> int:
    ds, mcfg, tcfg, extra = _load_experiment(args.config, args.seed, args.data)
    if args.epochs_scale is not None:
        tcfg = replace(tcfg, epochs_scale=args.epochs_scale)
    report = repeated_runs(
        ds, mcfg, tcfg, n_runs=args.runs, top_m=args.top, workers=args.workers, extra_config=extra
    )
    out_dir = Path(args.out_dir or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "runs.json").write_text(report.to_json())
    (out_dir / "runs.csv").write_text(runs_csv(report))
    print(
        f"top-{args.top} of {args.runs}: test {report.test_mean:.4f} ± {report.test_std:.4f}; "
        f"reports in {out_dir}"
    )
    if args.figures:
        from multihop import plots

        paths = plots.render_runs_figures(report, out_dir)
        print("figures:", *[str(p) for p in paths])
    return 0


def cmd_cv(args) -> int:
    ds, mcfg, tcfg, extra = _load_experiment(args.config, args.seed, args.data)
    if args.epochs_scale is not None:
        tcfg = replace(tcfg, epochs_scale=args.epochs_scale)
    baseline = ModelConfig.from_dict(_read_json(args.baseline)) if args.baseline else None
    report = cross_validate(
        ds, mcfg, tcfg, folds=args.folds, seed=args.cv_seed, baseline=baseline, workers=args.workers
    )
    out = Path(args.out or "cv_report.json")
    out.write_text(report.to_json())
    line = f"cv mean {report.mean:.4f} ± {report.std:.4f}"
    if baseline is not None:
        line += f" vs baseline {report.baseline_mean:.4f} (paired p={report.ttest_p:.4g})"
    print(line + f"; report: {out}")
    if args.figures:
        from multihop import plots

        paths = plots.render_cv_figures(report, args.figures)
        print("figures:", *[str(p) for p in paths])
    return 0


def cmd_khop_build(args) -> int:
    g = WeightedGraph.from_json(Path(args.graph).read_text())
    started = time.perf_counter()
    result = build_khop(g, args.k, exact_distance=args.exact_distance == "on")
    Path(args.out).write_text(result.to_json())
    print(
        f"hop-{args.k} graph: {result.num_edges} edges from {g.num_edges} "
        f"({time.perf_counter() - started:.2f}s) -> {args.out}"
    )
    return 0


def cmd_khop_compare(args) -> int:
    rng = np.random.default_rng(args.seed)
    started = time.perf_counter()
    failures = 0
    for trial in range(args.n):
        size = int(rng.integers(4, args.max_nodes + 1))
        prob = float(rng.uniform(0.2, 0.6))
        edges = [
            (i, j, float(1.0 - rng.random()))  # weights in (0, 1]
            for i in range(size)
            for j in range(i + 1, size)
            if rng.random() < prob
        ]
        g = WeightedGraph.from_edges(size, edges)
        for k in range(2, args.kmax + 1):
            for exact in (True, False):
                if build_khop(g, k, exact_distance=exact) != khop_oracle(g, k, exact_distance=exact):
                    failures += 1
                    print(f"MISMATCH trial={trial} n={size} k={k} exact={exact}", file=sys.stderr)
    elapsed = time.perf_counter() - started
    status = "PASS" if failures == 0 else f"FAIL ({failures} mismatches)"
    print(f"{status}: {args.n} graphs, k=2..{args.kmax}, both modes, {elapsed:.1f}s")
    return 0 if failures == 0 else 1


def _read_features_csv(path: str) -> np.ndarray:
    rows = {}
    dim = 0
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        parts = line.split(",")
        node = int(parts[0])
        vals = {}
        for tok in parts[1:]:
            if tok:
                idx, val = tok.split(":")
                vals[int(idx)] = float(val)
                dim = max(dim, int(idx) + 1)
        rows[node] = vals
    n = max(rows) + 1 if rows else 0
    out = np.zeros((n, dim))
    for node, vals in rows.items():
        for idx, val in vals.items():
            out[node, idx] = val
    return out


def _read_meta_csv(path: str, betas: dict) -> MetaTable:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    names = header[1:]
    rows = [line.split(",") for line in lines[1:] if line.strip()]
    n = len(rows)
    table = np.zeros((n, len(names)))
    for parts in rows:
        table[int(parts[0])] = [float(x) for x in parts[1:]]
    return MetaTable(
        n,
        tuple(
            Measure(name, table[:, c], beta=float(betas.get(name, 0.0)))
            for c, name in enumerate(names)
        ),
    )


def cmd_affinity_build(args) -> int:
    betas = _read_json(args.betas) if args.betas else {}
    meta = _read_meta_csv(args.meta, betas)
    features = _read_features_csv(args.features)
    adjacency = meta_adjacency(meta)
    sigma = None if args.sigma == "auto" else float(args.sigma)
    cfg = AffinityConfig(distance=args.distance, sigma=sigma)
    weights = feature_edge_weights(features, adjacency, cfg)
    graph = build_affinity(adjacency, weights)
    Path(args.out).write_text(graph.to_json())
    print(f"affinity graph: {graph.n} nodes, {graph.num_edges} edges -> {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from multihop.khop import build_hop_set

    rng = np.random.default_rng(args.seed)
    checks = {}

    def graph(n=6, p=0.5):
        edges = [
            (i, j, float(rng.uniform(0.2, 1.0)))
            for i in range(n)
            for j in range(i + 1, n)
            if rng.random() < p
        ]
        return WeightedGraph.from_edges(n, edges)

    wanted = set(args.layers.split(",")) if args.layers != "all" else {
        "gcn", "cheb", "awc", "elu", "loss", "model"
    }
    labels = rng.integers(0, 3, 6)
    mask = np.ones(6, dtype=bool)

    if "gcn" in wanted:
        prop = sym_renormalize(graph())
        h = nn.Tensor2(rng.standard_normal((6, 4)), requires_grad=True)
        th = nn.Tensor2(rng.standard_normal((4, 3)), requires_grad=True)
        checks["gcn"] = nn.grad_check(
            lambda: nn.masked_softmax_xent(nn.gcn_layer_forward(prop, h, th), labels, mask),
            [h, th],
            epsilon=args.eps,
        )
    if "cheb" in wanted:
        lap = scaled_laplacian(graph(), 1.7)
        h = nn.Tensor2(rng.standard_normal((6, 4)), requires_grad=True)
        ths = [nn.Tensor2(rng.standard_normal((4, 3)), requires_grad=True) for _ in range(4)]
        checks["cheb"] = nn.grad_check(
            lambda: nn.masked_softmax_xent(nn.cheb_layer_forward(lap, h, ths), labels, mask),
            [h, *ths],
            epsilon=args.eps,
        )
    if "awc" in wanted:
        outs = [nn.Tensor2(rng.standard_normal((6, 3)), requires_grad=True) for _ in range(3)]
        alpha = nn.Tensor2(rng.standard_normal((3, 1)), requires_grad=True)
        checks["awc"] = nn.grad_check(
            lambda: nn.masked_softmax_xent(
                nn.awc_forward(outs, nn.AwcParams(alpha))[0], labels, mask
            ),
            [*outs, alpha],
            epsilon=args.eps,
        )
    if "elu" in wanted:
        h = nn.Tensor2(rng.standard_normal((6, 3)), requires_grad=True)
        checks["elu"] = nn.grad_check(
            lambda: nn.masked_softmax_xent(nn.elu(h), labels, mask), [h], epsilon=args.eps
        )
    if "loss" in wanted:
        h = nn.Tensor2(rng.standard_normal((6, 3)), requires_grad=True)
        checks["loss"] = nn.grad_check(
            lambda: nn.add(
                nn.masked_softmax_xent(h, labels, mask), nn.l2_penalty([h], 3e-3)
            ),
            [h],
            epsilon=args.eps,
        )
    if "model" in wanted:
        g = graph(8, 0.45)
        hops = build_hop_set(g, 2)
        cfg = ModelConfig(
            branches=2, conv="first-order", layer_widths=(5, 3), fusion="awc", dropout_rate=0.0
        )
        model = build_model(cfg, hops, 4, np.random.default_rng(args.seed), dtype=np.float64)
        feats = rng.standard_normal((8, 4))
        mlabels = rng.integers(0, 3, 8)
        mmask = np.ones(8, dtype=bool)

        def full():
            logits, _ = model.forward(feats, training=False)
            return nn.add(
                nn.masked_softmax_xent(logits, mlabels, mmask),
                nn.l2_penalty(model.conv_parameters(), cfg.l2_weight),
            )

        checks["model"] = nn.grad_check(full, model.parameters(), epsilon=args.eps)

    worst = 0.0
    for name, err in checks.items():
        status = "ok" if err < 1e-4 else "FAIL"
        print(f"{name}: max relative error {err:.3e} [{status}]")
        worst = max(worst, err)
    return 0 if worst < 1e-4 else 1


def cmd_export(args) -> int:
    if args.graph_dot:
        g = WeightedGraph.from_json(Path(args.graph_dot).read_text())
        Path(args.out).write_text(g.to_dot())
        print(f"DOT export -> {args.out}")
        return 0
    if args.report_csv:
        payload = _read_json(args.report_csv)
        report = RunsReport(
            runs=[RunReport.from_json(json.dumps(r)) for r in payload["runs"]],
            selected_seeds=payload["selected_seeds"],
            test_mean=payload.get("test_mean", 0.0),
            test_std=payload.get("test_std", 0.0),
            protocol=payload.get("protocol", {}),
        )
        Path(args.out).write_text(runs_csv(report))
        print(f"CSV export -> {args.out}")
        return 0
    if args.embeddings:
        if not args.config:
            raise SystemExit("--embeddings needs --config (and optionally --checkpoint)")
        ds, mcfg, tcfg, _ = _load_experiment(args.config, None, args.data)
        hops = prepare_hops(ds, mcfg)
        rng_init, _ = np.random.default_rng(tcfg.seed).spawn(2)
        model = build_model(mcfg, hops, ds.feature_dim, rng_init)
        if args.checkpoint:
            model.load_checkpoint(args.checkpoint)
        feats = ds.features
        logits, _ = model.forward(
            feats.astype(np.float32) if hasattr(feats, "astype") else feats, training=False
        )
        rows = ["node_id," + ",".join(f"c{c}" for c in range(logits.cols))]
        for i, row in enumerate(logits.values):
            rows.append(",".join([str(i), *(f"{v:.6g}" for v in row)]))
        Path(args.out).write_text("\n".join(rows) + "\n")
        print(f"embeddings {logits.rows}x{logits.cols} -> {args.out}")
        return 0
    raise SystemExit("export needs one of --embeddings / --graph-dot / --report-csv")


def cmd_report(args) -> int:
    from multihop import plots

    payload = _read_json(args.run)
    out_dir = Path(args.out_dir)
    if "runs" in payload and "selected_seeds" in payload:
        runs = [RunReport.from_json(json.dumps(r)) for r in payload["runs"]]
        report = RunsReport(
            runs=runs,
            selected_seeds=payload["selected_seeds"],
            test_mean=payload["test_mean"],
            test_std=payload["test_std"],
            protocol=payload.get("protocol", {}),
        )
        paths = plots.render_runs_figures(report, out_dir)
    elif "folds" in payload:
        folds = [RunReport.from_json(json.dumps(r)) for r in payload["folds"]]
        report = CvReport(
            fold_reports=folds,
            accs=payload["accs"],
            mean=payload["mean"],
            std=payload["std"],
            baseline_accs=payload.get("baseline_accs"),
            baseline_mean=payload.get("baseline_mean"),
            ttest_t=payload.get("ttest_t"),
            ttest_p=payload.get("ttest_p"),
        )
        paths = plots.render_cv_figures(report, out_dir)
    else:
        report = RunReport.from_json(json.dumps(payload))
        paths = plots.render_run_figures(report, out_dir)
    print("figures:", *[str(p) for p in paths])
    return 0


def cmd_convert(args) -> int:
    ds = convert_planetoid(args.raw, args.name, args.out)
    print(f"converted {args.name}: n={ds.n}, edges={ds.graph.num_edges}, classes={ds.num_classes} -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multihop", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def experiment_flags(p):
        p.add_argument("--config", required=True, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--data", default=None, help="override dataset directory")
        p.add_argument("--epochs-scale", type=float, default=None, dest="epochs_scale")
        p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("train", help="one seeded training run")
    experiment_flags(p)
    p.add_argument("--out", default=None)
    p.add_argument("--figures", default=None, help="directory for PNG charts")
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("runs", help="repeated runs with validation-ranked selection")
    experiment_flags(p)
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--top", type=int, default=50)
    p.add_argument("--out-dir", default=None, dest="out_dir")
    p.add_argument("--figures", action="store_true")
    p.set_defaults(fn=cmd_runs)

    p = sub.add_parser("cv", help="stratified k-fold cross-validation")
    experiment_flags(p)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--cv-seed", type=int, default=0, dest="cv_seed")
    p.add_argument("--baseline", default=None, help="model-config JSON for a paired t-test")
    p.add_argument("--out", default=None)
    p.add_argument("--figures", default=None)
    p.set_defaults(fn=cmd_cv)

    p = sub.add_parser("khop", help="k-hop graph tools")
    ksub = p.add_subparsers(dest="khop_command", required=True)
    pb = ksub.add_parser("build", help="build one hop graph")
    pb.add_argument("--graph", required=True)
    pb.add_argument("--k", type=int, required=True)
    pb.add_argument("--exact-distance", choices=("on", "off"), default="on", dest="exact_distance")
    pb.add_argument("--out", required=True)
    pb.set_defaults(fn=cmd_khop_build)
    pc = ksub.add_parser("compare", help="equivalence sweep against the exhaustive oracle")
    pc.add_argument("--oracle", action="store_true", help="compare against the exhaustive oracle (the default and only mode)")
    pc.add_argument("--n", type=int, default=200)
    pc.add_argument("--max-nodes", type=int, default=12, dest="max_nodes")
    pc.add_argument("--kmax", type=int, default=4)
    pc.add_argument("--seed", type=int, default=0)
    pc.set_defaults(fn=cmd_khop_compare)

    p = sub.add_parser("affinity", help="affinity graph tools")
    asub = p.add_subparsers(dest="affinity_command", required=True)
    pa = asub.add_parser("build", help="meta-data adjacency times feature-similarity weights")
    pa.add_argument("--features", required=True)
    pa.add_argument("--meta", required=True)
    pa.add_argument("--betas", default=None)
    pa.add_argument("--distance", choices=("correlation", "l1"), default="correlation")
    pa.add_argument("--sigma", default="auto")
    pa.add_argument("--out", required=True)
    pa.set_defaults(fn=cmd_affinity_build)

    p = sub.add_parser("gradcheck", help="finite-difference checks for every layer")
    p.add_argument("--layers", default="all")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("export", help="embeddings, DOT graphs, CSV tables")
    p.add_argument("--embeddings", action="store_true")
    p.add_argument("--graph-dot", default=None, dest="graph_dot", help="graph JSON to convert")
    p.add_argument("--report-csv", default=None, dest="report_csv", help="runs JSON to convert")
    p.add_argument("--config", default=None)
    p.add_argument("--data", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export)

    p = sub.add_parser("report", help="render figures from stored reports")
    p.add_argument("--run", required=True, help="run/runs/cv report JSON")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("convert", help="dataset converters")
    csub = p.add_subparsers(dest="convert_command", required=True)
    pp = csub.add_parser("planetoid", help="upstream citation pickles to the portable layout")
    pp.add_argument("--raw", required=True)
    pp.add_argument("--name", required=True)
    pp.add_argument("--out", required=True)
    pp.set_defaults(fn=cmd_convert)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
