"""``featuredex`` command line: gen, extract, train, index, query, eval, pipeline.

Exit codes: 0 success, 1 usage error, 2 I/O or parse error, 3 dimension or
configuration mismatch, 4 numeric failure.
"""

import argparse
import configparser
import json
import logging
from pathlib import Path
import sys

from . import datagen, descriptor, net, retrieval, workflow
from .descriptor import DescriptorConfig
from .errors import FeaturedexError
from .mesh_io import read_stl
from .pooling import SppConfig
from ._fileio import atomic_write_text

log = logging.getLogger("featuredex")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_MISMATCH, EXIT_NUMERIC = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- option helpers --------------------------------------------------------------

def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return v


def _positive_float(text):
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a number > 0, got {text}")
    return v


def _nonneg_float(text):
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"expected a number >= 0, got {text}")
    return v


def _levels(text):
    try:
        levels = tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad level list {text!r}") from None
    if not levels or min(levels) < 1:
        raise argparse.ArgumentTypeError("levels must be a non-empty list of integers >= 1")
    return levels


def _families(text):
    names = [t.strip() for t in text.split(",") if t.strip()]
    try:
        return [datagen.get_family(n).name for n in names]
    except KeyError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def _add_descriptor_opts(p):
    d = DescriptorConfig()
    p.add_argument("--points", type=_positive_int, default=d.n_points,
                   help=f"surface samples per model (default {d.n_points})")
    p.add_argument("--voxel-size", type=_nonneg_float, default=d.voxel_size,
                   help=f"voxel downsampling edge in cm, 0 disables (default {d.voxel_size})")
    p.add_argument("--radius", type=_positive_float, default=d.radius,
                   help=f"descriptor neighbourhood radius in cm (default {d.radius})")
    p.add_argument("--sample-seed", type=int, default=d.seed,
                   help=f"seed for surface sampling (default {d.seed})")


def _add_spp_opts(p):
    s = SppConfig()
    p.add_argument("--levels", type=_levels, default=s.levels,
                   help="pyramid levels, comma separated (default 1,2,4)")
    p.add_argument("--domain", choices=("cube", "bbox"), default=s.domain,
                   help="pooling domain (default cube)")


def _descriptor_cfg(args):
    return DescriptorConfig(args.points, args.voxel_size, args.radius, args.sample_seed)


def _spp_cfg(args):
    return SppConfig(args.levels, args.domain)


# -- subcommands --------------------------------------------------------------

def cmd_gen(args):
    recs = datagen.generate_dataset(args.out, args.families, args.per_family, args.resolution,
                                    args.seed, log=log.debug)
    digest = workflow.file_digest(Path(args.out) / "manifest.jsonl")
    print(f"wrote {len(recs)} models to {args.out} (manifest sha256 {digest})")
    return EXIT_OK


def cmd_extract(args):
    recs = workflow.extract_dataset(args.data, _descriptor_cfg(args))
    print(f"extracted {len(recs)} feature matrices into {Path(args.data) / 'features'}")
    return EXIT_OK


def _train_cfg(args):
    return net.TrainConfig(epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=args.seed)


def cmd_train(args):
    params, hist, classes = workflow.train_dataset(args.data, _train_cfg(args), _spp_cfg(args))
    out = Path(args.out) if args.out else Path(args.data) / "net.fnet"
    net.save_params(params, out)
    report = {"history": hist.as_dict(), "classes": classes,
              "parameter_count": params.parameter_count()}
    atomic_write_text(out.with_suffix(".history.json"), json.dumps(report, indent=2))
    print(f"trained {params.parameter_count()} parameters, best epoch {hist.best_epoch}; wrote {out}")
    return EXIT_OK


def cmd_index(args):
    dcfg = workflow.load_descriptor_config(args.data)
    if args.mode == "learned" and args.model is None:
        raise UsageError("--model is required for --mode learned")
    params = net.load_params(args.model) if args.mode == "learned" else None
    index = workflow.index_dataset(args.data, dcfg, _spp_cfg(args), args.mode, params)
    out = Path(args.out) if args.out else Path(args.data) / f"index-{args.mode}.fidx"
    retrieval.save_index(index, out)
    print(f"indexed {len(index)} models (dimension {index.dimension}, mode {index.mode}); wrote {out}")
    return EXIT_OK


def _load_query_features(path, dcfg, seed):
    path = Path(path)
    if path.suffix.lower() == ".fmat":
        return descriptor.read_fmat(path)[1]
    return workflow.features_for_mesh(read_stl(path), dcfg, seed)


def cmd_query(args):
    index = retrieval.load_index(args.index)
    dcfg = workflow.load_descriptor_config(args.data) if args.data else _descriptor_cfg(args)
    scfg = _spp_cfg(args)
    params = None
    if index.mode == "learned":
        if args.model is None:
            raise UsageError("index is in learned mode; pass --model")
        params = net.load_params(args.model)
    workflow.check_provenance(index, dcfg, scfg, params)
    fm = _load_query_features(args.input, dcfg, args.query_seed)
    emb = workflow.embed(fm, index.mode, scfg, params)
    hits = retrieval.query(index, emb, args.k, exclude_id=args.exclude_id)

    print(f"{'No.':>4}  {'Model ID':>8}  {'Family':<26}  {'Euclidean Distance':>18}")
    for rank, (mid, fam, dist) in enumerate(hits, 1):
        print(f"{rank:>4}  {mid:>8}  {datagen.family_name(fam):<26}  {dist:>18.4f}")
    if args.json:
        rows = [{"rank": n, "id": m, "family": datagen.family_name(f), "distance": d}
                for n, (m, f, d) in enumerate(hits, 1)]
        atomic_write_text(args.json, json.dumps(rows, indent=2))
    return EXIT_OK


def format_report(metrics: dict) -> str:
    lines = []
    for name in ("baseline", "spp_raw", "spp_learned", "spp"):
        if name not in metrics:
            continue
        m = metrics[name]
        lines.append(f"{name:<12} top-1 {m['top1']:.3f}   top-{m['k']} {m['topk']:.3f}   "
                     f"({m['n_queries']} queries)")
    for name in ("spp_learned", "spp_raw", "spp"):
        if name in metrics:
            lines.append("")
            lines.append(f"Most retrieved foreign families ({name})")
            lines.append(f"{'Family of test file':<26}  {'Family 1':<26}  {'Family 2':<26}")
            for fam, row in metrics[name]["per_family"].items():
                conf = [datagen.family_name(f) for f, _ in row["most_confused"]] + ["-", "-"]
                lines.append(f"{datagen.family_name(int(fam)):<26}  {conf[0]:<26}  {conf[1]:<26}")
            break
    return "\n".join(lines)


def cmd_eval(args):
    index = retrieval.load_index(args.index)
    ev = workflow.evaluate_dataset(args.data, index, args.k)
    metrics = {"baseline": ev["baseline"], f"spp_{index.mode}": ev["spp"]}
    print(format_report(metrics))
    if args.report:
        atomic_write_text(args.report, json.dumps(metrics, indent=2, sort_keys=True))
    return EXIT_OK


# -- pipeline ----------------------------------------------------------------

PIPELINE_DEFAULTS = {
    "out": "run",
    "families": ",".join(datagen.DEFAULT_FAMILIES),
    "per_family": "50",
    "resolution": "64",
    "seed": "42",
    "points": str(DescriptorConfig().n_points),
    "voxel_size": str(DescriptorConfig().voxel_size),
    "radius": str(DescriptorConfig().radius),
    "levels": "1,2,4",
    "domain": "cube",
    "epochs": "30",
    "lr": "0.001",
    "batch_size": "16",
    "k": "5",
}


def read_pipeline_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise FeaturedexError(f"{path}: {e}") from e
    try:
        parser.read_string("[pipeline]\n" + text)
    except configparser.Error as e:
        raise UsageError(f"bad config file: {e}") from None
    cfg = dict(PIPELINE_DEFAULTS)
    for key, value in parser["pipeline"].items():
        key = key.replace("-", "_")
        if key not in cfg:
            raise UsageError(f"unknown config key {key!r}")
        cfg[key] = value
    return cfg


def run_pipeline(cfg: dict) -> dict:
    try:
        seed = int(cfg["seed"])
        families = _families(cfg["families"])
        per_family = _positive_int(cfg["per_family"])
        resolution = int(cfg["resolution"])
        dcfg = DescriptorConfig(_positive_int(cfg["points"]), _nonneg_float(cfg["voxel_size"]),
                                _positive_float(cfg["radius"]), seed)
        scfg = SppConfig(_levels(cfg["levels"]), cfg["domain"])
        tcfg = net.TrainConfig(epochs=_positive_int(cfg["epochs"]), lr=_positive_float(cfg["lr"]),
                               batch_size=_positive_int(cfg["batch_size"]), seed=seed)
        k = _positive_int(cfg["k"])
    except (ValueError, argparse.ArgumentTypeError) as e:
        raise UsageError(f"bad config value: {e}") from None
    if not 16 <= resolution <= 256:
        raise UsageError("resolution must be in [16, 256]")

    out = Path(cfg["out"])
    log.info("generating dataset in %s", out)
    records = datagen.generate_dataset(out, families, per_family, resolution, seed, log=log.debug)
    log.info("extracting descriptors")
    workflow.extract_dataset(out, dcfg)
    features = workflow.load_features(out, records)
    log.info("training")
    params, hist, classes = workflow.train_dataset(out, tcfg, scfg, records, features)
    net.save_params(params, out / "net.fnet")

    # the output location is left out so reports from different directories compare equal
    report = {"config": {k: v for k, v in cfg.items() if k != "out"}, "classes": classes, "parameter_count": params.parameter_count(),
              "history": hist.as_dict()}
    digests = {}
    for mode in ("raw", "learned"):
        index = workflow.index_dataset(out, dcfg, scfg, mode, params, records, features)
        path = out / f"index-{mode}.fidx"
        retrieval.save_index(index, path)
        digests[mode] = workflow.file_digest(path)
        ev = workflow.evaluate_dataset(out, index, k, records, features)
        report["baseline"] = ev["baseline"]
        report[f"spp_{mode}"] = ev["spp"]
    report["digests"] = {"manifest": workflow.file_digest(out / "manifest.jsonl"),
                         "net": workflow.file_digest(out / "net.fnet"),
                         **{f"index_{m}": d for m, d in digests.items()}}
    atomic_write_text(out / "report.json", json.dumps(report, indent=2, sort_keys=True))
    return report


def cmd_pipeline(args):
    cfg = read_pipeline_config(args.config)
    if args.out:
        cfg["out"] = args.out
    report = run_pipeline(cfg)
    print(format_report(report))
    print(f"\nreport written to {Path(cfg['out']) / 'report.json'}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="featuredex", description=__doc__.splitlines()[0],
                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--families", type=_families, default=list(datagen.DEFAULT_FAMILIES),
                   help="comma-separated family names (default: 8 families over all four groups)")
    g.add_argument("--per-family", type=_positive_int, default=50)
    g.add_argument("--resolution", type=int, choices=range(16, 257), metavar="[16-256]", default=64)
    g.add_argument("--seed", type=int, default=42)
    g.set_defaults(func=cmd_gen)

    e = sub.add_parser("extract", help="sample point clouds and compute descriptors")
    e.add_argument("--data", required=True)
    _add_descriptor_opts(e)
    e.set_defaults(func=cmd_extract)

    t = sub.add_parser("train", help="train the pooled classifier")
    t.add_argument("--data", required=True)
    t.add_argument("--out", help="FNET output (default DATA/net.fnet)")
    t.add_argument("--epochs", type=_positive_int, default=30)
    t.add_argument("--lr", type=_positive_float, default=1e-3)
    t.add_argument("--batch-size", type=_positive_int, default=16)
    t.add_argument("--seed", type=int, default=42)
    _add_spp_opts(t)
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("index", help="build and save a retrieval index")
    i.add_argument("--data", required=True)
    i.add_argument("--mode", choices=("raw", "learned"), default="raw")
    i.add_argument("--model", help="FNET file (learned mode)")
    i.add_argument("--out", help="FIDX output (default DATA/index-MODE.fidx)")
    _add_spp_opts(i)
    i.set_defaults(func=cmd_index)

    q = sub.add_parser("query", help="rank indexed models against an STL or FMAT file")
    q.add_argument("input")
    q.add_argument("--index", required=True)
    q.add_argument("--model", help="FNET file (learned indexes)")
    q.add_argument("--data", help="dataset root whose descriptor config to use")
    q.add_argument("-k", type=_positive_int, default=5)
    q.add_argument("--exclude-id", type=int)
    q.add_argument("--query-seed", type=int, default=0, help="sampling seed for STL input")
    q.add_argument("--json", help="also write the ranking as JSON here")
    _add_descriptor_opts(q)
    _add_spp_opts(q)
    q.set_defaults(func=cmd_query)

    v = sub.add_parser("eval", help="top-1/top-k metrics for baseline and SPP retrieval")
    v.add_argument("--data", required=True)
    v.add_argument("--index", required=True)
    v.add_argument("-k", type=_positive_int, default=5)
    v.add_argument("--report", help="write machine-readable metrics here")
    v.set_defaults(func=cmd_eval)

    pl = sub.add_parser("pipeline", help="run every stage from one config file")
    pl.add_argument("config")
    pl.add_argument("--out", help="override the config's output directory")
    pl.set_defaults(func=cmd_pipeline)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"featuredex: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"featuredex: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FeaturedexError as e:
        print(f"featuredex: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except KeyError as e:
        print(f"featuredex: missing entry {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except OSError as e:
        print(f"featuredex: {e}", file=sys.stderr)
        return EXIT_IO


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
