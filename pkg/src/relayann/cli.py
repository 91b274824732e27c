"""Command line: artifact builders, the server, and the benchmark client."""

from __future__ import annotations

import argparse
import logging
import sys
import time

import numpy as np

log = logging.getLogger("relayann")


def _load(path: str, elem_kind: str, max_points: int | None = None):
    from .vecdata import load_dataset
    return load_dataset(path, elem_kind, max_points)


def cmd_gen_data(a) -> int:
    from .vecdata import generate_dataset, save_dataset
    total = a.num_points + a.num_queries
    ds = generate_dataset(total, a.dim, a.elem_kind, a.mode, a.seed)
    base = ds.subset(np.arange(a.num_points))
    save_dataset(a.out, base)
    if a.num_queries:
        if not a.queries_out:
            raise SystemExit("--queries-out is required with --num-queries")
        save_dataset(a.queries_out, ds.subset(np.arange(a.num_points, total)))
    return 0


def cmd_gt(a) -> int:
    from .vecdata import brute_force_knn, save_groundtruth
    base = _load(a.base, a.elem_kind)
    queries = _load(a.queries, a.elem_kind)
    save_groundtruth(a.out, brute_force_knn(base, queries.data, a.k))
    return 0


def cmd_build_graph(a) -> int:
    from .graph import build_vamana
    t0 = time.perf_counter()
    g = build_vamana(_load(a.data, a.elem_kind), R=a.R, L_build=a.L, alpha=a.alpha, seed=a.seed)
    g.save(a.out)
    log.info("graph: %d nodes, mean degree %.2f, %.1fs", g.num_points, g.degrees.mean(), time.perf_counter() - t0)
    return 0


def cmd_train_pq(a) -> int:
    from .pq import encode, save_codes, train_pq
    ds = _load(a.data, a.elem_kind)
    cb = train_pq(ds, m=a.m, bits=a.bits, train_sample_size=a.sample, seed=a.seed)
    cb.save(a.out_codebook)
    save_codes(a.out_codes, encode(cb, ds))
    return 0


def cmd_partition(a) -> int:
    from .partition import partition_balanced_kmeans, partition_graph_aware, partition_random
    ds = _load(a.data, a.elem_kind)
    if a.method == "random":
        pm = partition_random(ds.num_points, a.P, a.seed)
    elif a.method == "kmeans":
        pm = partition_balanced_kmeans(ds, a.P, a.epsilon, a.seed)
    else:
        if not a.graph:
            raise SystemExit("--graph is required for the graph-aware partitioner")
        from .graph import VamanaGraph
        g = VamanaGraph.load(a.graph)
        pm = partition_graph_aware(g, ds, a.P, a.epsilon, a.seed)
        log.info("edge cut: %d", pm.cut_edges(g))
    pm.save(a.out)
    return 0


def cmd_build_disk(a) -> int:
    from .diskindex import build_disk_index
    from .graph import VamanaGraph
    from .partition import PartitionMap
    pm = PartitionMap.load(a.partition_map) if a.partition_map else None
    build_disk_index(VamanaGraph.load(a.graph), _load(a.data, a.elem_kind), pm, a.partition_id, a.out)
    return 0


def cmd_build_head(a) -> int:
    from .headindex import build_head_index
    build_head_index(_load(a.data, a.elem_kind), a.fraction, a.R, a.L, a.seed).save(a.out)
    return 0


def cmd_build_scatter(a) -> int:
    from .node import build_scatter_gather_indexes
    from .partition import PartitionMap
    build_scatter_gather_indexes(_load(a.data, a.elem_kind), PartitionMap.load(a.partition_map), a.out_dir,
                                 R=a.R, L_build=a.L, alpha=a.alpha, pq_subspaces=a.m, seed=a.seed)
    return 0


def cmd_serve(a) -> int:
    from .node import ConfigError, ServerConfig, serve
    try:
        cfg = ServerConfig.from_file(a.config)
        return serve(cfg)
    except (ConfigError, OSError) as exc:
        log.error("cannot start server: %s", exc)
        return 2


def _bench_setup(a):
    from .bench import Client
    from .search import SearchParams
    from .vecdata import load_groundtruth
    queries = _load(a.queries, a.elem_kind, a.num_queries).data
    gt = load_groundtruth(a.gt) if a.gt else None
    if gt is not None:
        gt.ids, gt.dists = gt.ids[: len(queries)], gt.dists[: len(queries)]
    client = Client(a.servers.split(","))
    client.ping_all()
    return client, queries, gt, SearchParams


def _emit(rows, path) -> None:
    from .bench import CSV_FIELDS, write_csv
    if path:
        write_csv(rows, path)
    else:
        print(",".join(CSV_FIELDS))
        for r in rows:
            print(",".join(str(r[k]) for k in CSV_FIELDS))


def cmd_bench_throughput(a) -> int:
    from .bench import run_throughput
    client, queries, gt, SearchParams = _bench_setup(a)
    with client:
        rep = run_throughput(client, queries, SearchParams(a.k, a.L, a.W), a.mode, gt, a.timeout)
    _emit([rep.row()], a.csv)
    return 1 if rep.failed else 0


def cmd_bench_latency(a) -> int:
    from .bench import run_latency
    client, queries, gt, SearchParams = _bench_setup(a)
    with client:
        rep = run_latency(client, queries, SearchParams(a.k, a.L, a.W), a.rate, a.mode, a.arrivals, a.seed, gt,
                          a.timeout)
    _emit([rep.row()], a.csv)
    return 1 if rep.failed else 0


def cmd_sweep(a) -> int:
    from .bench import run_throughput
    client, queries, gt, SearchParams = _bench_setup(a)
    rows = []
    with client:
        for W in a.Ws:
            for L in a.Ls:
                rows.append(run_throughput(client, queries, SearchParams(a.k, L, W), a.mode, gt, a.timeout).row())
    _emit(rows, a.csv)
    return 0


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="relayann", description="Distributed disk-based ANN search over one graph.")
    p.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        return sp

    def data_args(sp, name="--data"):
        sp.add_argument(name, required=True)
        sp.add_argument("--elem-kind", default="u8", choices=["u8", "i8", "f32"])

    sp = add("gen-data", cmd_gen_data, "write a seeded synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--num-points", type=int, required=True)
    sp.add_argument("--dim", type=int, default=128)
    sp.add_argument("--elem-kind", default="u8", choices=["u8", "i8", "f32"])
    sp.add_argument("--mode", default="clustered", choices=["clustered", "uniform"])
    sp.add_argument("--num-queries", type=int, default=0)
    sp.add_argument("--queries-out")
    sp.add_argument("--seed", type=int, default=0)

    sp = add("gt", cmd_gt, "exact k-NN ground truth")
    data_args(sp, "--base")
    sp.add_argument("--queries", required=True)
    sp.add_argument("--k", type=int, default=100)
    sp.add_argument("--out", required=True)

    sp = add("build-graph", cmd_build_graph, "build the global search graph")
    data_args(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--R", type=int, default=64)
    sp.add_argument("--L", type=int, default=128)
    sp.add_argument("--alpha", type=float, default=1.2)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("train-pq", cmd_train_pq, "train PQ codebooks and encode the corpus")
    data_args(sp)
    sp.add_argument("--out-codebook", required=True)
    sp.add_argument("--out-codes", required=True)
    sp.add_argument("--m", type=int, default=32)
    sp.add_argument("--bits", type=int, default=8)
    sp.add_argument("--sample", type=int)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("partition", cmd_partition, "assign nodes to servers")
    data_args(sp)
    sp.add_argument("--graph")
    sp.add_argument("--P", type=int, required=True)
    sp.add_argument("--method", default="graph-aware", choices=["graph-aware", "kmeans", "random"])
    sp.add_argument("--epsilon", type=float, default=0.05)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("build-disk", cmd_build_disk, "write one partition's disk index")
    data_args(sp)
    sp.add_argument("--graph", required=True)
    sp.add_argument("--partition-map")
    sp.add_argument("--partition-id", type=int, default=0)
    sp.add_argument("--out", required=True)

    sp = add("build-head", cmd_build_head, "build the replicated routing index")
    data_args(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--fraction", type=float, default=0.01)
    sp.add_argument("--R", type=int, default=32)
    sp.add_argument("--L", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("build-scatter", cmd_build_scatter, "independent per-shard indexes for scatter-gather")
    data_args(sp)
    sp.add_argument("--partition-map", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--R", type=int, default=64)
    sp.add_argument("--L", type=int, default=128)
    sp.add_argument("--alpha", type=float, default=1.2)
    sp.add_argument("--m", type=int, default=32)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("serve", cmd_serve, "run one server")
    sp.add_argument("--config", required=True)

    def bench_args(sp):
        sp.add_argument("--servers", required=True, help="comma-separated host:port of every server, by partition")
        sp.add_argument("--queries", required=True)
        sp.add_argument("--elem-kind", default="u8", choices=["u8", "i8", "f32"])
        sp.add_argument("--num-queries", type=int)
        sp.add_argument("--gt")
        sp.add_argument("--mode", default="batann", choices=["batann", "scatter"])
        sp.add_argument("--k", type=int, default=10)
        sp.add_argument("--timeout", type=float, default=30.0)
        sp.add_argument("--csv")

    sp = add("bench-throughput", cmd_bench_throughput, "issue all queries at once")
    bench_args(sp)
    sp.add_argument("--L", type=int, default=128)
    sp.add_argument("--W", type=int, default=8)

    sp = add("bench-latency", cmd_bench_latency, "open-loop latency at a send rate")
    bench_args(sp)
    sp.add_argument("--L", type=int, default=128)
    sp.add_argument("--W", type=int, default=8)
    sp.add_argument("--rate", type=float, required=True)
    sp.add_argument("--arrivals", default="fixed", choices=["fixed", "poisson"])
    sp.add_argument("--seed", type=int, default=0)

    sp = add("sweep", cmd_sweep, "throughput rows over L and W values")
    bench_args(sp)
    sp.add_argument("--Ls", type=_ints, default=[20, 40, 80])
    sp.add_argument("--Ws", type=_ints, default=[1, 8])
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper(), logging.INFO),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
