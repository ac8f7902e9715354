"""``spcat``: train, transform, encode, search, evaluate and analyze.

Exit codes: 0 success, 1 usage, 2 data, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import binarycodes, lattice, plotting, searcheval
from .neuralnet import CheckpointError, load_checkpoint, save_checkpoint
from .trainer import TSV_HEADER, TrainConfig, TrainingError, default_lambda, train
from .vecio import FormatError, brute_force_knn, l2_normalize, read_vecs, write_vecs

log = logging.getLogger("spcat")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- feature maps

class FeatureMap:
    """Input vectors -> features.  ``features`` are unit rows for the lattice
    codec and float search; ``signs`` are the values whose signs make binary codes."""

    def __init__(self, kind, d_in, d_out, fn, sign_fn=None):
        self.kind, self.d_in, self.d_out = kind, d_in, d_out
        self._fn, self._sign_fn = fn, sign_fn or fn

    def _check(self, x, what):
        if self.d_in is not None and x.shape[1] != self.d_in:
            raise DataError(f"{what} has dimension {x.shape[1]}, the {self.kind} transform expects {self.d_in}")

    def features(self, x, what="input"):
        self._check(x, what)
        if self._fn is None:
            raise UsageError("an LSH projection only produces binary codes; use --codec sign")
        return self._fn(x)

    def signs(self, x, what="input"):
        self._check(x, what)
        return self._sign_fn(x)


def _unit(x):
    try:
        return l2_normalize(x).astype(np.float32)
    except ValueError as e:
        raise DataError(str(e)) from e


def feature_map(args, d_in=None) -> FeatureMap:
    if args.model:
        model = load_checkpoint(_readable(args.model))
        if args.dout is not None and args.dout != model.d_out:
            raise UsageError(f"--dout {args.dout} disagrees with the checkpoint's d_out={model.d_out}")
        fn = lambda x: model.forward(x, block=4096)  # noqa: E731
        return FeatureMap("model", model.d_in, model.d_out, fn)
    if args.pca:
        if not args.pca_train or args.dout is None:
            raise UsageError("--pca needs --pca-train and --dout")
        fit_on = read_vecs(_readable(args.pca_train))
        try:
            basis = binarycodes.pca_fit(fit_on, args.dout)
        except ValueError as e:
            raise DataError(str(e)) from e
        return FeatureMap("pca", basis.d, basis.m, basis.transform, basis.project)
    if args.lsh:
        if args.bits is None or d_in is None:
            raise UsageError("--lsh needs --bits")
        basis = binarycodes.lsh_basis(d_in, args.bits, args.seed)
        return FeatureMap("lsh", d_in, args.bits, None, basis.project)
    if args.dout is not None and args.dout != d_in:
        raise UsageError("--dout without --model or --pca has no effect unless it equals the input dimension")
    return FeatureMap("identity", None, d_in, _unit, lambda x: x)


# ---------------------------------------------------------------- helpers

def _readable(path) -> str:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{path}: no such file")
    return str(p)


def _writable(path) -> str:
    parent = Path(path).resolve().parent
    if not parent.is_dir():
        raise DataError(f"{parent}: output directory does not exist")
    return str(path)


def _resolve_r2(args):
    r2 = getattr(args, "r2", None)
    radius = getattr(args, "radius", None)
    if radius is not None:
        if r2 is not None:
            raise UsageError("give either --r2 or --radius, not both")
        r2 = round(radius * radius)
        if r2 < 1 or not math.isclose(r2, radius * radius, rel_tol=0, abs_tol=1e-3):
            raise UsageError(f"--radius {radius}: squared radius must be a positive integer")
    return r2


def _codec(args):
    codec = args.codec
    if args.binary:
        if codec not in (None, "sign"):
            raise UsageError("--binary conflicts with --codec lattice")
        codec = "sign"
    codec = codec or "lattice"
    r2 = _resolve_r2(args)
    if codec == "sign" and r2 is not None:
        raise UsageError("--r2/--radius only apply to the lattice codec")
    if codec == "lattice":
        if args.lsh:
            raise UsageError("--lsh only produces binary codes; use --codec sign")
        if r2 is None:
            raise UsageError("the lattice codec needs --r2 or --radius")
    return codec, r2


def _read_codes(path):
    path = _readable(path)
    with open(path, "rb") as f:
        magic = f.read(6)
    if magic[:5] == lattice.CODE_MAGIC[:5]:
        codes, cb = lattice.read_codes(path)
        return codes, cb, cb.d
    if magic[:5] == binarycodes.CODE_MAGIC[:5]:
        codes, m = binarycodes.read_codes(path)
        return codes, None, m
    raise DataError(f"{path}: unknown code file (magic {magic!r})")


def _parse_ints(text):
    try:
        out = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not out or min(out) < 1:
        raise argparse.ArgumentTypeError("values must be positive")
    return out


def _parse_floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _search(args, fmap, codes, cb, width, queries, k):
    if k > len(codes):
        raise UsageError(f"k={k} exceeds the {len(codes)} encoded vectors")
    if cb is None:
        q = binarycodes.binarize(fmap.signs(queries, "queries"))
        if q.shape[1] != codes.shape[1] or fmap.d_out != width:
            raise DataError(f"queries map to {fmap.d_out} bits, codes have {width}")
        return searcheval.scan_search(q, codes, k)
    q = fmap.features(queries, "queries")
    if q.shape[1] != cb.d:
        raise DataError(f"queries map to dimension {q.shape[1]}, lattice codes are {cb.d}-dimensional")
    return searcheval.scan_search(q, codes, k, codebook=cb)


# ---------------------------------------------------------------- subcommands

def cmd_gt(args):
    base, queries = read_vecs(_readable(args.base)), read_vecs(_readable(args.queries))
    out = _writable(args.out)
    if base.shape[1] != queries.shape[1]:
        raise DataError(f"base is {base.shape[1]}-dimensional, queries are {queries.shape[1]}-dimensional")
    k = min(args.k, len(base))
    write_vecs(out, brute_force_knn(base, queries, k).astype(np.int32), "ivecs")


def cmd_synth(args):
    from .synthetic import make_benchmark

    out = Path(args.out_dir)
    if not out.is_dir():
        raise DataError(f"{out}: output directory does not exist")
    bm = make_benchmark(args.seed, n_train=args.n_train, n_base=args.n_base,
                        n_query=args.n_query, d=args.d, gt_k=args.gt_k)
    write_vecs(out / "train.fvecs", bm.train, "fvecs")
    write_vecs(out / "base.fvecs", bm.base, "fvecs")
    write_vecs(out / "queries.fvecs", bm.queries, "fvecs")
    write_vecs(out / "gt.ivecs", bm.gt.astype(np.int32), "ivecs")


def cmd_train(args):
    path = _readable(args.input)
    out = _writable(args.out)
    log_path = _writable(args.log or f"{args.out}.log.tsv")
    r2 = _resolve_r2(args)
    lam = default_lambda(args.dout) if args.lam is None else args.lam
    config = TrainConfig(lam=lam, k_pos=args.kpos, k_neg=args.kneg, d_out=args.dout,
                         d_hidden=args.hidden, epochs=args.epochs, batch_size=args.batch,
                         momentum=args.momentum, seed=args.seed, end_to_end=args.end_to_end, r2=r2)
    try:
        config.validate()
        if r2 is not None:
            lattice.LatticeCodebook(args.dout, r2)
    except ValueError as e:
        raise UsageError(str(e)) from e
    x = read_vecs(path)
    if len(x) <= max(config.k_pos, config.k_neg):
        raise DataError(f"{path}: {len(x)} vectors, need more than k_pos and k_neg")

    with open(log_path, "w") as f:
        print(TSV_HEADER, file=f, flush=True)

        def on_epoch(stats):
            print(stats.tsv(), file=f, flush=True)
            log.info(stats.tsv())

        model, _ = train(x.astype(np.float32), config, on_epoch=on_epoch)
    save_checkpoint(model, out)


def cmd_transform(args):
    x = read_vecs(_readable(args.input))
    out = _writable(args.out)
    fmap = feature_map(args, x.shape[1])
    write_vecs(out, np.asarray(fmap.features(x), dtype=np.float32), "fvecs")


def cmd_encode(args):
    codec, r2 = _codec(args)
    x = read_vecs(_readable(args.input))
    out = _writable(args.out)
    fmap = feature_map(args, x.shape[1])
    t0 = time.perf_counter()
    if codec == "lattice":
        feats = fmap.features(x)
        try:
            cb = lattice.LatticeCodebook(feats.shape[1], r2)
        except ValueError as e:
            raise UsageError(str(e)) from e
        codes = cb.encode(cb.assign(feats))
        bits = cb.bits
        elapsed = time.perf_counter() - t0
        lattice.write_codes(out, codes, cb)
    else:
        codes = binarycodes.binarize(fmap.signs(x))
        bits = fmap.d_out
        elapsed = time.perf_counter() - t0
        binarycodes.write_codes(out, codes, bits)
    print(f"vectors\t{len(x)}")
    print(f"codec\t{codec}")
    print(f"bits_per_vector\t{bits}")
    rate = len(x) / elapsed if elapsed > 0 else float("inf")
    print(f"encoded {len(x)} vectors in {elapsed:.3f} s ({rate:.0f} vectors/s)", file=sys.stderr)


def cmd_search(args):
    codes, cb, width = _read_codes(args.codes)
    queries = read_vecs(_readable(args.queries))
    out = _writable(args.out)
    fmap = feature_map(args, queries.shape[1])
    write_vecs(out, _search(args, fmap, codes, cb, width, queries, args.k).astype(np.int32), "ivecs")


def cmd_eval(args):
    codes, cb, width = _read_codes(args.codes)
    queries = read_vecs(_readable(args.queries))
    if not args.gt or not Path(args.gt).is_file():
        raise DataError(f"ground truth {args.gt!r} not found; recall needs it (see `spcat gt`)")
    gt = read_vecs(args.gt)
    report_path = _writable(args.report) if args.report else None
    if len(gt) != len(queries):
        raise DataError(f"ground truth has {len(gt)} rows for {len(queries)} queries")
    if gt.size and gt.max() >= len(codes):
        raise DataError(f"ground truth refers to id {gt.max()}, only {len(codes)} vectors are encoded")
    fmap = feature_map(args, queries.shape[1])
    k = min(max(args.k), len(codes))
    t0 = time.perf_counter()
    results = _search(args, fmap, codes, cb, width, queries, k)
    elapsed = time.perf_counter() - t0
    params = {"codes": Path(args.codes).name, "codec": "sign" if cb is None else "lattice",
              "bits": width if cb is None else cb.bits, "d_out": fmap.d_out if cb is None else cb.d,
              "transform": fmap.kind, "queries": len(queries)}
    if cb is not None:
        params["r2"] = cb.r2
    report = searcheval.evaluate(results, gt, args.k, params, {"search_s": elapsed})
    print(f"searched {len(codes)} codes for {len(queries)} queries in {elapsed:.3f} s", file=sys.stderr)
    text = report.to_tsv()
    sys.stdout.write(text)
    if report_path:
        Path(report_path).write_text(text)
    if args.json:
        Path(_writable(args.json)).write_text(report.to_json() + "\n")


def _auto_thresholds(base, queries, gt, n=24):
    true_nn = np.asarray(gt)[:, 0]
    d = np.sqrt(((np.asarray(queries, np.float64) - np.asarray(base, np.float64)[true_nn]) ** 2).sum(axis=1))
    eps = np.unique(np.quantile(d, np.linspace(0.02, 1.0, n)))
    return eps[eps > 0]


def cmd_analyze(args):
    base = read_vecs(_readable(args.input))
    out = Path(args.out_dir)
    if not out.is_dir():
        raise DataError(f"{out}: output directory does not exist")
    queries = gt = None
    if args.queries or args.gt:
        if not (args.queries and args.gt):
            raise UsageError("epsilon curves need both --queries and --gt")
        queries = read_vecs(_readable(args.queries))
        gt = read_vecs(_readable(args.gt))
        if len(gt) != len(queries) or (gt.size and gt.max() >= len(base)):
            raise DataError("ground truth does not match the queries / base")
    fmap = feature_map(args, base.shape[1])

    spaces = {"input": (base, queries)}
    if fmap.kind != "identity":
        spaces[fmap.kind] = (fmap.features(base), None if queries is None else fmap.features(queries, "queries"))

    rng = np.random.default_rng(args.seed)
    sub = np.sort(rng.choice(len(base), args.max_points, replace=False)) if len(base) > args.max_points else None

    angular, uniform, curves = {}, {}, {}
    for label, (b, q) in spaces.items():
        angular[label] = searcheval.angular_histogram(b, args.planes, args.bins, seed=args.seed)
        pts = b if sub is None else b[sub]
        if len(pts) > args.k_far:
            uniform[label] = searcheval.uniformity_overlap(pts, args.k_far, args.pairs, seed=args.seed)
        if q is not None:
            eps = args.eps if args.eps else _auto_thresholds(b, q, gt)
            curves[label] = searcheval.epsilon_curve(b, q, gt, np.sort(np.asarray(eps)))
            curves[label].at_target = searcheval.results_at_recall(b, q, gt, args.target_recall)

    with open(out / "angular.tsv", "w") as f:
        f.write("space\tplane\tbin\tangle_lo\tcount\n")
        for label, counts in angular.items():
            edges = np.linspace(-np.pi, np.pi, args.bins + 1)
            for p, row in enumerate(counts):
                for i, c in enumerate(row):
                    f.write(f"{label}\t{p}\t{i}\t{edges[i]:.6f}\t{c}\n")
    if uniform:
        with open(out / "uniformity.tsv", "w") as f:
            f.write("space\tpoints\tk_far\tpairs\toverlap\tmean_nn1\tmean_nnk\n")
            for label, s in uniform.items():
                f.write(f"{label}\t{len(s.nn1)}\t{s.k_far}\t{s.pairs}\t{s.probability:.6f}\t"
                        f"{s.nn1.mean():.6f}\t{s.nnk.mean():.6f}\n")
        plotting.distance_histograms(uniform, out / "nn_distances.png")
    if curves:
        with open(out / "epsilon.tsv", "w") as f:
            f.write("space\teps\tmean_results\tnn_recall\n")
            for label, c in curves.items():
                for e, m, r in c.rows():
                    f.write(f"{label}\t{e:.6f}\t{m:.3f}\t{r:.6f}\n")
        with open(out / "epsilon_at_recall.tsv", "w") as f:
            f.write("space\ttarget_recall\teps\tmean_results\n")
            for label, c in curves.items():
                e, m = c.at_target
                f.write(f"{label}\t{args.target_recall:g}\t{e:.6f}\t{m:.3f}\n")
        plotting.epsilon_curves(curves, out / "epsilon.png")
    plotting.angular_histograms(angular, out / "angular.png")
    for label, s in uniform.items():
        print(f"{label}\toverlap\t{s.probability:.6f}")
    for label, c in curves.items():
        print(f"{label}\tresults_at_recall_{args.target_recall:g}\t{c.at_target[1]:.3f}")


# ---------------------------------------------------------------- parser

def _common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None,
                   help="cap BLAS worker threads (default: $SPCAT_THREADS or all cores)")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded numerics for byte-identical outputs")
    p.add_argument("--config", help="JSON file of option defaults; command-line flags win")
    p.add_argument("-v", "--verbose", action="store_true")


def _transform_flags(p, lsh=True):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--model", help="catalyzer checkpoint")
    g.add_argument("--pca", action="store_true", help="PCA baseline (needs --pca-train, --dout)")
    if lsh:
        g.add_argument("--lsh", action="store_true", help="random-projection LSH baseline (needs --bits)")
        p.add_argument("--bits", type=int)
    p.add_argument("--pca-train", help="vectors the PCA is fitted on")
    p.add_argument("--dout", type=int, help="PCA output dimension, or the expected model d_out")


def _codec_flags(p):
    p.add_argument("--codec", choices=("lattice", "sign"))
    p.add_argument("--binary", action="store_true", help="same as --codec sign")
    p.add_argument("--r2", type=int, help="squared lattice radius")
    p.add_argument("--radius", type=float, help="lattice radius r; r*r must be an integer")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spcat", description="Spread-out feature learning and lattice/binary codes.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a catalyzer")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="TSV training log (default: <out>.log.tsv)")
    p.add_argument("--dout", type=int, default=24)
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="regularizer weight (default: tabulated by --dout)")
    p.add_argument("--kpos", type=int, default=10)
    p.add_argument("--kneg", type=int, default=50)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--batch", type=int, default=1024)
    p.add_argument("--hidden", type=int, default=1024)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--end-to-end", "--end2end", dest="end_to_end", action="store_true", help="straight-through lattice quantization")
    p.add_argument("--r2", type=int, help="squared lattice radius (end-to-end mode)")
    p.add_argument("--radius", type=float, help="lattice radius r; r*r must be an integer")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transform", help="map vectors through a catalyzer or PCA")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    _transform_flags(p, lsh=False)
    _common(p)
    p.set_defaults(func=cmd_transform, lsh=False, bits=None)

    p = sub.add_parser("encode", help="transform and encode a database")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    _transform_flags(p)
    _codec_flags(p)
    _common(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("search", help="exhaustive search of a code file")
    p.add_argument("--codes", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True, help="result ids (ivecs)")
    p.add_argument("--k", type=int, default=100)
    _transform_flags(p)
    _common(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", help="recall 1@k of a code file")
    p.add_argument("--codes", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--gt")
    p.add_argument("--k", type=_parse_ints, default=[1, 10, 100], help="comma-separated k values")
    p.add_argument("--report", help="TSV report path (also printed)")
    p.add_argument("--json", help="JSON report path")
    _transform_flags(p)
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="uniformity, epsilon-search and angular statistics, with figures")
    p.add_argument("--input", required=True, help="base vectors")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--queries")
    p.add_argument("--gt")
    p.add_argument("--eps", type=_parse_floats, help="range-search thresholds (default: automatic)")
    p.add_argument("--target-recall", type=float, default=0.8)
    p.add_argument("--planes", type=int, default=2)
    p.add_argument("--bins", type=int, default=64)
    p.add_argument("--k-far", type=int, default=100)
    p.add_argument("--pairs", type=int, default=100_000)
    p.add_argument("--max-points", type=int, default=20_000)
    _transform_flags(p, lsh=False)
    _common(p)
    p.set_defaults(func=cmd_analyze, lsh=False, bits=None)

    p = sub.add_parser("gt", help="brute-force ground truth")
    p.add_argument("--base", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=100)
    _common(p)
    p.set_defaults(func=cmd_gt)

    p = sub.add_parser("synth", help="write the fixed-seed synthetic benchmark")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-base", type=int, default=20000)
    p.add_argument("--n-query", type=int, default=500)
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--gt-k", type=int, default=100)
    _common(p)
    p.set_defaults(func=cmd_synth)
    return parser


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            conf = json.loads(Path(args.config).read_text())
        except OSError as e:
            raise DataError(f"{args.config}: {e.strerror}") from e
        except json.JSONDecodeError as e:
            raise UsageError(f"{args.config}: invalid JSON ({e})") from e
        if not isinstance(conf, dict):
            raise UsageError(f"{args.config}: expected a JSON object")
        known = vars(args)
        unknown = sorted(k for k in conf if k not in known or k in ("func", "command", "config"))
        if unknown:
            raise UsageError(f"{args.config}: unknown option(s) {', '.join(unknown)}")
        # re-parse with the file as defaults so explicit flags still win
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        subparser.set_defaults(**conf)
        args = parser.parse_args(argv)
    for name in ("k_far", "pairs", "max_points", "planes", "bins", "threads"):
        v = getattr(args, name, None)
        if v is not None and v < 1:
            parser.error(f"--{name.replace('_', '-')} must be >= 1")
    return args


def _thread_limit(args):
    if args.deterministic:
        return 1
    if args.threads is not None:
        return args.threads
    env = os.environ.get("SPCAT_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"SPCAT_THREADS={env!r} is not an integer")
        if n < 1:
            raise UsageError("SPCAT_THREADS must be >= 1")
        return n
    return None


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(name)s: %(message)s", stream=sys.stderr)
        limit = _thread_limit(args)
        with threadpool_limits(limits=limit):
            args.func(args)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    except UsageError as e:
        print(f"spcat: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, FloatingPointError) as e:
        print(f"spcat: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FormatError, CheckpointError, OSError, ValueError) as e:
        print(f"spcat: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
