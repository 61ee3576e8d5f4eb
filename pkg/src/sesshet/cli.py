"""Command line pipeline: prepare -> graph -> pretrain -> train -> eval / recommend.

Every stage reads and writes artifacts under a run directory (``--dir``,
default ``$SESSHET_DATA_DIR``). Each artifact carries the dataset's
vocabulary hash so stages built from different data refuse to mix.

Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from contextlib import nullcontext
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import diffcore as dc
from . import synthetic
from .dataio import PRESETS as DATA_PRESETS
from .dataio import (DataError, Dataset, default_data_dir, load_dataset, make_batch,
                     parse_log, preprocess, save_dataset, write_log)
from .hetgnn import SRHetGNN
from .hetgraph import Kind, NeighborTable, build_graph, load_graph, save_graph
from .pretrain import deepwalk, load_embeddings, save_embeddings
from .trainer import (PRESETS as EXPERIMENTS, EvalReport, ModelScorer, PipelineConfig, ReportRow, TrainConfig,
                      TrainingError, baseline_markov, baseline_popularity, recall_curve, run_experiment, train)

log = logging.getLogger("sesshet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# tunables accepted from --config files and flags; value parsers
_BOOL = lambda s: str(s).strip().lower() in ("1", "true", "yes", "on")
_INTS = lambda s: tuple(int(x) for x in str(s).replace(",", " ").split())
SETTINGS = {
    "d": int, "lr": float, "epochs": int, "batch_size": int, "restart_prob": float,
    "rwr_list_len": int, "k_user": int, "k_item": int, "k_session": int,
    "no_session_nodes": _BOOL, "no_hetgnn": _BOOL, "seed": int, "topn": _INTS,
    "prefixes": str, "walk_length": int, "walks_per_node": int, "window": int,
    "negatives": int, "sg_epochs": int, "sg_lr": float,
}
DEFAULTS = {
    "d": 64, "lr": 0.0002, "epochs": 10, "batch_size": 100, "restart_prob": 0.5, "rwr_list_len": 100,
    "k_user": 15, "k_item": 10, "k_session": 1, "no_session_nodes": False, "no_hetgnn": False,
    "seed": 0, "topn": (40, 50), "prefixes": "all", "walk_length": 20, "walks_per_node": 10,
    "window": 5, "negatives": 5, "sg_epochs": 1, "sg_lr": 0.025,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# settings -------------------------------------------------------------------

def read_config_file(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (x.strip() for x in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in SETTINGS:
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        try:
            out[key] = SETTINGS[key](value)
        except ValueError as exc:
            raise UsageError(f"{path}:{n}: bad value for {key}: {exc}") from None
    return out


def resolve_settings(args) -> dict:
    """defaults < --config file < explicit flags."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        if not Path(args.config).is_file():
            raise UsageError(f"config file not found: {args.config}")
        cfg.update(read_config_file(args.config))
    for key in SETTINGS:
        val = getattr(args, key, None)
        if val is not None and val is not False:
            cfg[key] = tuple(val) if key == "topn" else val
    try:
        pipeline_config(cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if cfg["d"] < 2 or min(cfg["topn"], default=0) < 1:
        raise UsageError("--d must be >= 2 and every --topn value >= 1")
    return cfg


def format_settings(cfg: dict) -> str:
    lines = []
    for key in sorted(cfg):
        v = cfg[key]
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def pipeline_config(cfg: dict) -> PipelineConfig:
    caps = {Kind.USER: cfg["k_user"], Kind.ITEM: cfg["k_item"], Kind.SESSION: cfg["k_session"]}
    tc = TrainConfig(lr=cfg["lr"], epochs=cfg["epochs"], batch_size=cfg["batch_size"], d=cfg["d"], caps=caps,
                     restart_prob=cfg["restart_prob"], rwr_list_len=cfg["rwr_list_len"], seed=cfg["seed"],
                     prefixes=cfg["prefixes"], use_hetgnn=not cfg["no_hetgnn"],
                     use_sessions=not cfg["no_session_nodes"])
    return PipelineConfig(tc, cfg["walk_length"], cfg["walks_per_node"], cfg["window"], cfg["negatives"],
                          cfg["sg_epochs"], cfg["sg_lr"], tuple(cfg["topn"]))


# manifests ------------------------------------------------------------------

def write_manifest(path: Path, values: dict):
    path.write_text("".join(f"{k}={v}\n" for k, v in values.items()))


def read_manifest(path: Path) -> dict:
    if not path.is_file():
        raise DataError(f"missing artifact manifest {path}")
    out = {}
    for line in path.read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    return out


def check_hash(expected: str, found: str | None, what: str):
    if found != expected:
        raise DataError(f"{what} was built from a different dataset (vocab hash {found} != {expected})")


# stage helpers --------------------------------------------------------------

def _run_dir(args) -> Path:
    return Path(args.dir) if args.dir else default_data_dir()


def _dataset(run: Path) -> Dataset:
    path = run / "dataset"
    if not path.is_dir():
        raise DataError(f"no prepared dataset in {path}; run `sesshet prepare` first")
    return load_dataset(path)


def _graph(run: Path, ds: Dataset):
    path = run / "graph.txt"
    if not path.is_file():
        raise DataError(f"no graph at {path}; run `sesshet graph` first")
    g = load_graph(path)
    check_hash(ds.vocab_hash(), g.vocab_hash, str(path))
    return g


def _embeddings(run: Path, ds: Dataset):
    path = run / "pretrain"
    man = read_manifest(path / "manifest.txt")
    check_hash(ds.vocab_hash(), man.get("vocab_hash"), str(path))
    return load_embeddings(path)


def _load_model(run: Path, ds: Dataset):
    path = run / "model"
    man = read_manifest(path / "manifest.txt")
    check_hash(ds.vocab_hash(), man.get("vocab_hash"), str(path))
    pre = _embeddings(run, ds)
    tc = TrainConfig(d=int(man["d"]), seed=int(man["seed"]), use_hetgnn=man["use_hetgnn"] == "1",
                     use_sessions=man["use_sessions"] == "1",
                     caps={Kind.USER: int(man["k_user"]), Kind.ITEM: int(man["k_item"]),
                           Kind.SESSION: int(man["k_session"])})
    model = SRHetGNN(tc.model_config(), pre)
    model.load_parameters(dc.load_tensors(path / "params.shtc"))
    extra = dc.load_tensors(path / "outputs.shtc")
    if model.cfg.use_hetgnn:
        model.neighbors = NeighborTable({k: extra[f"neighbors.{k.name.lower()}"].astype(np.int64) for k in Kind})
    return model, extra["item_embeddings"], man


def _scorer(args, run: Path, ds: Dataset):
    if args.baseline == "popularity":
        return baseline_popularity(ds), "popularity", {}
    if args.baseline == "markov":
        return baseline_markov(ds), "markov", {}
    model, V, man = _load_model(run, ds)
    return ModelScorer(model, V), "sr-hetgnn", man


# commands -------------------------------------------------------------------

def cmd_synth(args, cfg):
    if args.kind == "planted":
        rows = synthetic.planted_interactions()
        write_log(rows, args.out)
    else:
        Path(args.out).write_text(resources.files("sesshet").joinpath("data/mini_fixture.csv").read_text())
    print(f"wrote {args.out}")


def cmd_prepare(args, cfg):
    run = _run_dir(args)
    raw = parse_log(args.input)
    pcfg = synthetic.planted_config() if args.preset == "synthetic" else DATA_PRESETS[args.preset]
    ds = preprocess(raw, pcfg)
    save_dataset(ds, run / "dataset")
    stats = ds.stats()
    (run / "stats.txt").write_text("".join(f"{k}\t{v}\n" for k, v in stats.items())
                                   + f"vocab_hash\t{ds.vocab_hash()}\n")
    write_manifest(run / "dataset" / "manifest.txt",
                   {"stage": "prepare", "preset": args.preset, "vocab_hash": ds.vocab_hash(),
                    **{f"filter_{k}": v for k, v in vars(pcfg).items()}})
    for k, v in stats.items():
        print(f"{k}\t{v}")


def cmd_graph(args, cfg):
    run = _run_dir(args)
    ds = _dataset(run)
    g = build_graph(ds, include_sessions=not cfg["no_session_nodes"])
    save_graph(g, run / "graph.txt", ds.vocab_hash())
    (run / "graph.config").write_text(format_settings(cfg))
    print(f"nodes item={g.n_items} session={g.n_sessions} user={g.n_users} "
          f"transitions={len(g.transitions)} edges={len(g.edges)}")


def cmd_pretrain(args, cfg):
    run = _run_dir(args)
    ds = _dataset(run)
    g = _graph(run, ds)
    pc = pipeline_config(cfg)
    pre = deepwalk(g, cfg["d"], pc.walk_length, pc.walks_per_node, pc.window, pc.negatives,
                   pc.sg_epochs, pc.sg_lr, cfg["seed"])
    out = run / "pretrain"
    save_embeddings(pre, out)
    write_manifest(out / "manifest.txt", {"stage": "pretrain", "vocab_hash": ds.vocab_hash(), "d": cfg["d"],
                                          "seed": cfg["seed"], "sgns_loss": f"{pre.history[-1]:.8f}"})
    (out / "config.txt").write_text(format_settings(cfg))
    print(f"embeddings d={cfg['d']} nodes={g.n_nodes} sgns_loss={pre.history[-1]:.5f}")


def cmd_train(args, cfg):
    run = _run_dir(args)
    ds = _dataset(run)
    g = _graph(run, ds)
    pre = _embeddings(run, ds)
    tc = pipeline_config(cfg).train
    if g.n_sessions == 0:
        tc = replace(tc, use_sessions=False)
    res = train(ds, g, pre, tc)
    out = run / "model"
    out.mkdir(parents=True, exist_ok=True)
    dc.save_tensors(out / "params.shtc", res.model.parameters())
    extra = {"item_embeddings": res.model.item_embeddings()}
    if res.model.neighbors is not None:
        extra.update({f"neighbors.{k.name.lower()}": v.astype(np.float64)
                      for k, v in res.model.neighbors.index.items()})
    dc.save_tensors(out / "outputs.shtc", extra)
    man = {"stage": "train", "vocab_hash": ds.vocab_hash(), "d": tc.d, "seed": tc.seed, "lr": tc.lr,
           "epochs": tc.epochs, "batch_size": tc.batch_size, "restart_prob": tc.restart_prob,
           "k_user": tc.caps[Kind.USER], "k_item": tc.caps[Kind.ITEM], "k_session": tc.caps[Kind.SESSION],
           "use_hetgnn": int(tc.use_hetgnn), "use_sessions": int(tc.use_sessions),
           "loss": ",".join(f"{x:.8f}" for x in res.losses)}
    if not args.deterministic:
        man["epoch_seconds"] = ",".join(f"{x:.3f}" for x in res.epoch_seconds)
    write_manifest(out / "manifest.txt", man)
    (out / "config.txt").write_text(format_settings(cfg))
    for e, loss in enumerate(res.losses, 1):
        print(f"epoch {e}\tloss {loss:.6f}")


def cmd_eval(args, cfg):
    run = _run_dir(args)
    ds = _dataset(run)
    scorer, name, man = _scorer(args, run, ds)
    ns = tuple(cfg["topn"])
    rec = recall_curve(scorer, ds.test_sessions, ns, ds.n_items, cfg["prefixes"])
    losses = [float(x) for x in man["loss"].split(",")] if man.get("loss") else []
    seconds = [float(x) for x in man["epoch_seconds"].split(",")] if man.get("epoch_seconds") else []
    meta = {"vocab_hash": ds.vocab_hash(), **{f"data_{k}": str(v) for k, v in ds.stats().items()}}
    for key in ("d", "seed", "lr", "epochs", "use_hetgnn", "use_sessions"):
        if key in man:
            meta[key] = man[key]
    report = EvalReport("eval", [ReportRow(name, "", rec, losses, seconds)], meta)
    text = report.to_text(timing=not args.deterministic)
    (run / "report.txt").write_text(text)
    (run / "report.tsv").write_text(report.to_tsv())
    (run / "eval.config").write_text(format_settings(cfg))
    for n, v in sorted(rec.items()):
        print(f"Recall@{n}\t{v:.6f}")


def cmd_recommend(args, cfg):
    run = _run_dir(args)
    ds = _dataset(run)
    unknown = [x for x in args.items if x not in ds.item_vocab]
    if unknown:
        raise DataError(f"unknown item ids: {', '.join(unknown)}")
    scorer, _, _ = _scorer(args, run, ds)
    prefix = [ds.item_vocab[x] for x in args.items]
    batch = make_batch([(0, prefix, 0)])
    scores = np.asarray(scorer(batch))[0]
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:min(args.n, len(scores))]
    for i in order:
        print(f"{ds.item_vocab.ids[i]}\t{scores[i]:.6f}")


def cmd_experiment(args, cfg):
    run = _run_dir(args)
    pc = pipeline_config(cfg)
    report = run_experiment(args.preset, pc)
    out = run / "experiments"
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{args.preset}.txt").write_text(report.to_text(timing=not args.deterministic))
    (out / f"{args.preset}.tsv").write_text(report.to_tsv())
    (out / f"{args.preset}.config").write_text(format_settings(cfg))
    sys.stdout.write(report.to_tsv())


# parser ---------------------------------------------------------------------

def _add_common(p):
    p.add_argument("--dir", help="run directory (default: $SESSHET_DATA_DIR)")
    p.add_argument("--config", help="key=value settings file; flags override it")
    p.add_argument("--deterministic", action="store_true", help="single-thread numerics, no timings in reports")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_model(p):
    p.add_argument("--d", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--restart-prob", dest="restart_prob", type=float)
    p.add_argument("--k-user", dest="k_user", type=int)
    p.add_argument("--k-item", dest="k_item", type=int)
    p.add_argument("--k-session", dest="k_session", type=int)
    p.add_argument("--no-session-nodes", dest="no_session_nodes", action="store_true")
    p.add_argument("--no-hetgnn", dest="no_hetgnn", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--topn", type=int, nargs="+")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sesshet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a bundled or generated interaction log")
    p.add_argument("out")
    p.add_argument("--kind", choices=("planted", "mini"), default="planted")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="filter, split and index an interaction log")
    p.add_argument("--input", required=True)
    p.add_argument("--preset", choices=sorted(DATA_PRESETS) + ["synthetic"], default="diginetica")
    _add_common(p)
    p.set_defaults(func=cmd_prepare)

    for name, func, text in (("graph", cmd_graph, "build the heterogeneous graph"),
                             ("pretrain", cmd_pretrain, "DeepWalk pre-embeddings"),
                             ("train", cmd_train, "train the model"),
                             ("eval", cmd_eval, "Recall@n on the test split")):
        p = sub.add_parser(name, help=text)
        _add_common(p)
        _add_model(p)
        if name == "eval":
            p.add_argument("--baseline", choices=("popularity", "markov"))
        p.set_defaults(func=func)

    p = sub.add_parser("recommend", help="top-n next items for a session prefix")
    p.add_argument("items", nargs="+", help="external item ids, oldest first")
    p.add_argument("-n", type=int, default=10)
    p.add_argument("--baseline", choices=("popularity", "markov"))
    _add_common(p)
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("experiment", help="run a named experiment preset end to end")
    p.add_argument("--preset", choices=EXPERIMENTS, required=True)
    _add_common(p)
    _add_model(p)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_settings(args)
        if args.deterministic:
            from threadpoolctl import threadpool_limits
            guard = threadpool_limits(limits=1)
        else:
            guard = nullcontext()
        with guard:
            args.func(args, cfg)
    except UsageError as exc:
        print(f"sesshet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"sesshet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, dc.NumericError, FloatingPointError) as exc:
        print(f"sesshet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
