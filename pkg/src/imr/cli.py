"""``imr`` command-line driver."""

import argparse
import hashlib
import json
import logging
import os
import random
import sys

from . import __version__
from .apps import gimv_app, kmeans_app, pagerank_app, sssp_app
from .apps.codec import dec_vec
from .apps.paircount import frequent_candidates, pair_count_accumulator, pair_count_map
from .apps.wordcount import float_sum_reduce, in_edge_sum_map, int_sum_accumulator, sum_reduce, wordcount_map
from .compare import compare, load_results
from .datagen import gen_data, gen_delta, mutate_doc, mutate_graph, mutate_weight
from .engine import JobError, JobSpec, Mode, ReducerKind, as_input_records, run_job, write_outputs
from .faults import CheckpointError, CheckpointManager, FailureInjector, FailurePlan
from .incr_iter import run_incr_iterative
from .incremental import apply_delta, run_incremental, run_incremental_accumulator, run_initial
from .iterative import run_iterative
from .metrics import Metrics
from .mrbg import MRBGStore, StoreError
from .records import KIND_DELTA, KIND_INPUT, RecordError, open_sorted_run, write_sorted_run

log = logging.getLogger("imr")

ONE_STEP = ("wordcount", "paircount", "inedge")
ITERATIVE = ("pagerank", "sssp", "kmeans", "gimv")


def _workdir(args, attr="workdir"):
    wd = getattr(args, attr, None) or os.environ.get("IMR_WORKDIR")
    if not wd:
        raise SystemExit(f"--{attr} or IMR_WORKDIR is required")
    return wd


def _digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        h.update(f.read())
    return h.hexdigest()


def _records(path):
    return list(open_sorted_run(path))


def _one_step_fns(args, inputs):
    if args.app == "wordcount":
        return wordcount_map, sum_reduce, int_sum_accumulator
    if args.app == "inedge":
        return in_edge_sum_map, float_sum_reduce, None
    if args.app == "paircount":
        docs = [r.value for path in inputs for r in open_sorted_run(path)]
        cands = frequent_candidates(docs, args.min_count)
        return pair_count_map(cands), sum_reduce, pair_count_accumulator
    raise SystemExit(f"app {args.app!r} is not a one-step app")


def _iter_app(args, structure_path=None, state=None):
    if args.app == "pagerank":
        return pagerank_app(args.damping)
    if args.app == "sssp":
        return sssp_app(args.source.encode())
    if args.app == "kmeans":
        if state and b"1" in state:
            from .apps.kmeans import dec_centroids
            return kmeans_app(dec_centroids(state[b"1"]))
        pts = [dec_vec(r.value) for r in _records(structure_path)]
        rng = random.Random(args.seed)
        return kmeans_app([pts[i] for i in sorted(rng.sample(range(len(pts)), args.k))])
    if args.app == "gimv":
        return gimv_app(args.size, args.block_size)
    raise SystemExit(f"app {args.app!r} is not an iterative app")


def _spec(args, mode):
    return JobSpec(mode=mode, num_partitions=args.partitions, workers=args.workers,
                   tolerance=args.tol, max_iterations=args.max_iters,
                   filter_threshold=args.filter_thresh, auto_off_threshold=args.auto_off,
                   checkpoint_every=args.checkpoint_every,
                   reducer=ReducerKind.ACCUMULATOR if getattr(args, "accumulate", False) else ReducerKind.GENERAL)


def _write_manifest(workdir, args, inputs, metrics, extra):
    os.makedirs(workdir, exist_ok=True)
    manifest = {
        "version": __version__,
        "argv": sys.argv[1:],
        "spec": {k: v for k, v in vars(args).items() if k != "func"},
        "inputs": {p: _digest(p) for p in inputs if p and os.path.exists(p)},
        "iterations": metrics.events("iteration"),
        **extra,
    }
    with open(os.path.join(workdir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True, default=str)


def cmd_gen_data(args):
    recs = gen_data(args.app, args.size, args.seed, degree=args.degree, k=args.k)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "input.run")
    write_sorted_run(path, recs, KIND_INPUT, sort_key=lambda r: r.mk)
    print(path)
    return 0


def cmd_gen_delta(args):
    base = _records(args.input)
    n = len(base)
    if args.app == "sssp":
        mutate = mutate_weight
    elif args.app in ("pagerank", "inedge", "graph"):
        mutate = lambda rng, k, v: mutate_graph(rng, k, v, n)  # noqa: E731
    else:
        mutate = mutate_doc
    mix = tuple(float(x) for x in args.mix.split(","))
    try:
        delta = gen_delta(base, args.fraction, args.seed, mutate=mutate, mix=mix)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    write_sorted_run(args.out, delta, KIND_DELTA, sort_key=lambda d: (d.mk, d.sign != b"-"))
    print(args.out)
    return 0


def cmd_run(args):
    mode = Mode(args.mode)
    metrics = Metrics(args.metrics)
    extra = {}
    if mode in (Mode.PLAIN, Mode.INCR_ONESTEP):
        inputs = args.input or []
        map_fn, reduce_fn, acc = _one_step_fns(args, inputs)
        spec = _spec(args, mode)
        if mode is Mode.PLAIN:
            splits = inputs
            if args.delta:
                # Recompute over D + delta from scratch: the reference for incremental runs.
                base = [r for i, path in enumerate(inputs) for r in as_input_records(path, i)]
                splits = [apply_delta(base, args.delta)]
            res = run_job(spec, splits, map_fn, reduce_fn, metrics=metrics)
            out = args.out or os.path.join(_workdir(args), "results")
            write_outputs(out, res.outputs)
            extra["results"] = out
        else:
            wd = _workdir(args)
            if args.delta:
                if args.accumulate:
                    if acc is None:
                        raise SystemExit(f"app {args.app!r} has no accumulator")
                    res = run_incremental_accumulator(spec, args.delta, map_fn, acc, wd, metrics=metrics)
                else:
                    res = run_incremental(spec, args.delta, map_fn, reduce_fn, wd, metrics=metrics)
                extra["reduce_calls"] = res.reduce_calls
                extra["retractions"] = res.retractions
            else:
                res = run_initial(spec, inputs, map_fn, reduce_fn, wd, metrics=metrics)
            extra["results"] = os.path.join(wd, "results")
        inputs = inputs + (args.delta or [])
    elif mode is Mode.ITERATIVE:
        wd = _workdir(args)
        state = {r.key: r.value for r in _records(args.state)} if args.state else None
        app = _iter_app(args, args.structure, state)
        injector = FailureInjector(FailurePlan.load(args.inject_failures)) if args.inject_failures else None
        structure = [args.structure]
        if args.delta_structure:
            structure = apply_delta(as_input_records(args.structure, 0), args.delta_structure)
        res = run_iterative(app, _spec(args, mode), structure, state, workdir=wd, metrics=metrics,
                            injector=injector)
        extra.update(results=os.path.join(wd, "results"), iterations_run=res.iterations,
                     converged=res.converged)
        inputs = [args.structure, args.state] + list(args.delta_structure or [])
    else:
        wd = _workdir(args, "snapshot")
        state = load_results(os.path.join(wd, "results")) if args.app == "kmeans" else None
        app = _iter_app(args, os.path.join(wd, "structure", "part-00000.run"), state)
        injector = FailureInjector(FailurePlan.load(args.inject_failures)) if args.inject_failures else None
        res = run_incr_iterative(app, _spec(args, mode), args.delta_structure or [], wd, metrics=metrics,
                                 injector=injector)
        extra.update(results=os.path.join(wd, "results"), iterations_run=res.iterations,
                     converged=res.converged, mrbg_valid=res.mrbg_valid, recoveries=res.recoveries)
        inputs = list(args.delta_structure or [])
    if args.csv:
        metrics.to_csv(args.csv)
    target = extra["results"]
    where = target if mode is Mode.PLAIN else os.path.dirname(os.path.abspath(target))
    _write_manifest(where, args, inputs, metrics, extra)
    print(json.dumps({k: v for k, v in extra.items()}, default=str))
    return 0


def cmd_compare(args):
    got, want = load_results(args.a), load_results(args.b)
    v = compare(got, want, args.tol)
    out = v.as_dict()
    out["oracle"] = args.oracle_id or os.path.abspath(args.b)
    print(json.dumps(out, sort_keys=True))
    return 0 if v.ok else 1


def _stores(workdir):
    for name in sorted(os.listdir(workdir)):
        d = os.path.join(workdir, name)
        if name.startswith("part-") and os.path.exists(os.path.join(d, "mrbg.dat")):
            yield d


def cmd_compact(args):
    wd = _workdir(args)
    for d in _stores(wd):
        with MRBGStore(d) as s:
            before = s.file_size()
            s.compact()
            print(f"{d}: {before} -> {s.file_size()} bytes")
    return 0


def cmd_checkpoint_ls(args):
    wd = _workdir(args)
    root = os.path.join(wd, "ckpt")
    for row in CheckpointManager(root).describe():
        print(json.dumps(row))
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="imr", description="Incremental iterative MapReduce driver")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-data", help="generate a seeded input data set")
    g.add_argument("--app", required=True, choices=["pagerank", "sssp", "kmeans", "wordcount", "paircount", "inedge"])
    g.add_argument("--size", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--degree", type=int, default=5)
    g.add_argument("--k", type=int, default=2)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    d = sub.add_parser("gen-delta", help="generate a seeded delta against an input run file")
    d.add_argument("--input", required=True)
    d.add_argument("--app", default="wordcount")
    d.add_argument("--fraction", type=float, required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--mix", default="1,0,0", help="update,delete,insert weights")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_gen_delta)

    r = sub.add_parser("run", help="run a job")
    r.add_argument("--mode", required=True, choices=[m.value for m in Mode])
    r.add_argument("--app", required=True, choices=ONE_STEP + ITERATIVE)
    r.add_argument("--input", nargs="*")
    r.add_argument("--delta", nargs="*")
    r.add_argument("--structure")
    r.add_argument("--state")
    r.add_argument("--delta-structure", nargs="*")
    r.add_argument("--snapshot")
    r.add_argument("--workdir")
    r.add_argument("--out")
    r.add_argument("--accumulate", action="store_true")
    r.add_argument("--partitions", type=int, default=4)
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--tol", type=float, default=1e-6)
    r.add_argument("--max-iters", type=int, default=50)
    r.add_argument("--filter-thresh", type=float, default=None)
    r.add_argument("--auto-off", type=float, default=0.5)
    r.add_argument("--checkpoint-every", type=int, default=1)
    r.add_argument("--inject-failures")
    r.add_argument("--damping", type=float, default=0.85)
    r.add_argument("--source", default="0")
    r.add_argument("--k", type=int, default=2)
    r.add_argument("--size", type=int, default=0)
    r.add_argument("--block-size", type=int, default=1)
    r.add_argument("--min-count", type=int, default=2)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--metrics", help="JSON-lines metrics file")
    r.add_argument("--csv", help="per-iteration CSV export")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="compare results A against reference B")
    c.add_argument("a")
    c.add_argument("b")
    c.add_argument("--tol", type=float, default=0.0)
    c.add_argument("--oracle-id")
    c.set_defaults(func=cmd_compare)

    k = sub.add_parser("compact", help="compact every MRBGraph store in a workdir")
    k.add_argument("--workdir")
    k.set_defaults(func=cmd_compact)

    ls = sub.add_parser("checkpoint-ls", help="list checkpoints and their validity")
    ls.add_argument("--workdir")
    ls.set_defaults(func=cmd_checkpoint_ls)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (JobError, StoreError, RecordError, CheckpointError, OSError) as e:
        if args.verbose:
            raise
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
