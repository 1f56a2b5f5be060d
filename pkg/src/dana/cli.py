"""Command-line entry point: ``dana {train,eval,casestudy,linkpred,export-embeddings}``.

Any long option may also come from a flat ``key=value`` file passed with
``--config``; values given on the command line win.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import dump_json, load_checkpoint, read_kv, save_checkpoint, write_embeddings
from .errors import DanaError
from .evaluation import alignment_metrics
from .graph import load_anchors, load_edge_list, split_anchors
from .model import MODES
from .pipeline import CaseStudyConfig, LinkPredConfig, TrainConfig, run_case_study, run_linkpred, train

log = logging.getLogger("dana")


def _int_list(s: str) -> list[int]:
    return [int(v) for v in str(s).replace(" ", "").split(",") if v]


def _on_off(s: str) -> bool:
    s = str(s).lower()
    if s in ("on", "1", "true", "yes"):
        return True
    if s in ("off", "0", "false", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {s!r}")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dana", description="Align two networks with adversarially trained GCN embeddings")
    parser.add_argument("--config", help="flat key=value file providing defaults for any option")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train an alignment model")
    tr.add_argument("--edges-a", required=True)
    tr.add_argument("--edges-b", required=True)
    tr.add_argument("--anchors", required=True)
    tr.add_argument("--directed", type=_on_off, default=None,
                    help="read edge lists as directed (default: on for DANA-SD, off otherwise)")
    tr.add_argument("--mode", choices=sorted(MODES), default="DANA")
    tr.add_argument("--dim", type=int, default=100)
    tr.add_argument("--layers", type=int, default=2)
    tr.add_argument("--input-dim", type=int, default=None)
    tr.add_argument("--gamma", type=float, default=1.0)
    tr.add_argument("--lambda", dest="lam", type=float, default=0.01)
    tr.add_argument("--lr", type=float, default=0.001)
    tr.add_argument("--epochs", type=int, default=500)
    tr.add_argument("--batch-vertices", type=int, default=512)
    tr.add_argument("--batch-anchors", type=int, default=None)
    tr.add_argument("--candidates", type=int, default=128)
    tr.add_argument("--mse-negatives", type=int, default=50)
    tr.add_argument("--train-ratio", type=float, default=0.8)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--eval-every", type=int, default=25)
    tr.add_argument("--k", type=_int_list, default=[1, 5, 10, 30, 50])
    tr.add_argument("--init", choices=("scaled", "normal"), default="scaled")
    tr.add_argument("--sampler-order", choices=("degree", "id"), default="degree")
    tr.add_argument("--sampled-correction", type=_on_off, default=False)
    tr.add_argument("--within-track", action="store_true",
                    help="directed encoder recurses within each track instead of cross-coupling")
    tr.add_argument("--renormalized", action="store_true", help="use degrees of M+I in the kernels")
    tr.add_argument("--early-stop", action="store_true")
    tr.add_argument("--out", required=True)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on its test anchors")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--anchors", default=None,
                    help="full anchor file; re-split with the checkpoint's ratio and seed")
    ev.add_argument("--k", type=_int_list, default=[1, 5, 10, 30, 50])
    ev.add_argument("--out", default=None, help="write metrics.json here instead of stdout only")

    cs = sub.add_parser("casestudy", help="twinning-network case study on the karate graph")
    cs.add_argument("--out", required=True)
    cs.add_argument("--epochs", type=int, default=CaseStudyConfig.epochs)
    cs.add_argument("--seeds", type=_int_list, default=list(CaseStudyConfig.seeds))
    cs.add_argument("--lr", type=float, default=CaseStudyConfig.lr)
    cs.add_argument("--gamma", type=float, default=CaseStudyConfig.gamma)

    lp = sub.add_parser("linkpred", help="single-network link prediction with GCN or GCN-D")
    lp.add_argument("--edges", required=True)
    lp.add_argument("--directed-conv", type=_on_off, default=True)
    lp.add_argument("--dim", type=int, default=LinkPredConfig.dim)
    lp.add_argument("--layers", type=int, default=LinkPredConfig.layers)
    lp.add_argument("--epochs", type=int, default=LinkPredConfig.epochs)
    lp.add_argument("--lr", type=float, default=LinkPredConfig.lr)
    lp.add_argument("--negatives", type=int, default=LinkPredConfig.negatives)
    lp.add_argument("--seed", type=int, default=0)
    lp.add_argument("--out", required=True)

    ex = sub.add_parser("export-embeddings", help="write embeddings of a checkpoint as TSV")
    ex.add_argument("--checkpoint", required=True)
    ex.add_argument("--out", required=True)
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]):
    """Turn ``--config`` entries into parser defaults so explicit flags override them."""
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    values = {k.replace("-", "_"): v for k, v in read_kv(known.config).items()}
    if "lambda" in values:
        values["lam"] = values.pop("lambda")
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    for sp in subparsers.choices.values():
        known_dests = {a.dest: a for a in sp._actions}
        defaults = {}
        for k, v in values.items():
            action = known_dests.get(k)
            if action is None:
                continue
            if action.type is not None:
                v = action.type(v)
            elif isinstance(action, argparse._StoreTrueAction):
                v = _on_off(v)
            defaults[k] = v
            action.required = False
        sp.set_defaults(**defaults)


def _missing_required(args, parser) -> list[str]:
    sp = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction)).choices[args.command]
    return [a.option_strings[0] for a in sp._actions
            if a.option_strings and a.dest not in ("help",) and getattr(args, a.dest, None) is None
            and a.dest in _REQUIRED.get(args.command, ())]


_REQUIRED = {
    "train": ("edges_a", "edges_b", "anchors", "out"),
    "eval": ("checkpoint",),
    "casestudy": ("out",),
    "linkpred": ("edges", "out"),
    "export-embeddings": ("checkpoint", "out"),
}


def cmd_train(args) -> int:
    directed = args.directed if args.directed is not None else MODES[args.mode][2]
    ga = load_edge_list(args.edges_a, directed=directed)
    gb = load_edge_list(args.edges_b, directed=directed)
    pairs = load_anchors(args.anchors, ga, gb)
    anchors = split_anchors(pairs, args.train_ratio, args.seed)
    cfg = TrainConfig(
        mode=args.mode, layers=args.layers, dim=args.dim, input_dim=args.input_dim, gamma=args.gamma,
        lam=args.lam, lr=args.lr, batch_vertices=args.batch_vertices, batch_anchors=args.batch_anchors,
        candidates=args.candidates, mse_negatives=args.mse_negatives, epochs=args.epochs, seed=args.seed,
        train_ratio=args.train_ratio, init=args.init, cross_coupled=not args.within_track,
        renormalized=args.renormalized, sampler_order=args.sampler_order,
        sampled_correction=args.sampled_correction, eval_every=args.eval_every, eval_ks=tuple(args.k),
        early_stop=args.early_stop,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "epochs.jsonl", "w", encoding="utf-8") as ep, \
            open(out / "timings.tsv", "w", encoding="utf-8") as tm:
        def on_epoch(entry, _model):
            ep.write(json.dumps(entry.record(with_time=not cfg.strict), sort_keys=True) + "\n")
            tm.write(f"{entry.epoch}\t{entry.seconds:.6f}\n")
            if entry.metrics:
                log.info("epoch %d loss %.4f mrr %.4f", entry.epoch, entry.total, entry.metrics["mrr"])

        model, logs = train(ga, gb, anchors, cfg, on_epoch=on_epoch)
    ra, rb = model.embeddings()
    metrics = alignment_metrics(ra, rb, anchors.test, cfg.eval_ks)
    metrics.update(mode=cfg.mode, epochs=len(logs), train_anchors=len(anchors.train),
                   test_anchors=len(anchors.test))
    dump_json(out / "metrics.json", metrics)
    write_embeddings(out / "embeddings_a.tsv", ga.ids, ra)
    write_embeddings(out / "embeddings_b.tsv", gb.ids, rb)
    save_checkpoint(out / "checkpoint", model, ga, gb, anchors, len(logs), cfg.seed,
                    extra={**cfg.manifest(), "eval_ks": ",".join(map(str, cfg.eval_ks))})
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    model, ga, gb, anchors, man = load_checkpoint(args.checkpoint)
    test = anchors.test
    if args.anchors:
        pairs = load_anchors(args.anchors, ga, gb)
        test = split_anchors(pairs, float(man["train_ratio"]), int(man["split_seed"])).test
    ra, rb = model.embeddings()
    metrics = alignment_metrics(ra, rb, test, tuple(args.k))
    metrics.update(mode=man["mode"], epochs=int(man["epoch"]), train_anchors=len(anchors.train),
                   test_anchors=len(test))
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        dump_json(Path(args.out) / "metrics.json", metrics)
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_casestudy(args) -> int:
    cfg = CaseStudyConfig(epochs=args.epochs, seeds=tuple(args.seeds), lr=args.lr, gamma=args.gamma)
    bundle = run_case_study(cfg, out=args.out)
    print(json.dumps(bundle["summary"], sort_keys=True))
    return 0


def cmd_linkpred(args) -> int:
    g = load_edge_list(args.edges, directed=True)
    cfg = LinkPredConfig(directed_conv=args.directed_conv, dim=args.dim, layers=args.layers, epochs=args.epochs,
                         lr=args.lr, negatives=args.negatives, seed=args.seed)
    metrics = run_linkpred(g, cfg)
    metrics["directed_conv"] = cfg.directed_conv
    Path(args.out).mkdir(parents=True, exist_ok=True)
    dump_json(Path(args.out) / "metrics.json", metrics)
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_export(args) -> int:
    model, ga, gb, _, _ = load_checkpoint(args.checkpoint)
    ra, rb = model.embeddings()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_embeddings(out / "embeddings_a.tsv", ga.ids, ra)
    write_embeddings(out / "embeddings_b.tsv", gb.ids, rb)
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "casestudy": cmd_casestudy,
    "linkpred": cmd_linkpred,
    "export-embeddings": cmd_export,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        _apply_config_file(parser, argv)
    except (OSError, DanaError, ValueError, argparse.ArgumentTypeError) as exc:
        print(f"dana: error: config file: {exc}", file=sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    missing = _missing_required(args, parser)
    if missing:
        parser.print_usage(sys.stderr)
        print(f"dana {args.command}: error: missing required option(s): {', '.join(missing)}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (OSError, DanaError) as exc:
        print(f"dana {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
