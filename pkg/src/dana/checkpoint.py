"""Checkpoint directories: a key=value manifest plus one TSV per stored matrix."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .graph import AnchorSet, Graph, build_kernel
from .model import AlignmentModel, ModelConfig, init_model

__all__ = [
    "save_checkpoint",
    "load_checkpoint",
    "write_matrix",
    "read_matrix",
    "write_kv",
    "read_kv",
    "write_embeddings",
]

FMT = "%.17g"


def write_matrix(path, x):
    """Row-major TSV, 17 significant digits, one row per line."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    with open(path, "w", encoding="utf-8") as fh:
        for row in x:
            fh.write("\t".join(FMT % v for v in row) + "\n")


def read_matrix(path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                rows.append([float(v) for v in line.split("\t")])
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
    if rows and len({len(r) for r in rows}) != 1:
        raise ValidationError(f"{path}: ragged matrix")
    return np.array(rows, dtype=np.float64).reshape(len(rows), -1)


def write_embeddings(path, ids, r):
    with open(path, "w", encoding="utf-8") as fh:
        for vid, row in zip(ids, np.asarray(r)):
            fh.write(str(vid) + "\t" + "\t".join(FMT % v for v in row) + "\n")


def write_kv(path, items: dict):
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in items.items():
            fh.write(f"{k}={v}\n")


def read_kv(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError(path, lineno, "expected key=value")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def _save_graph(d: Path, name: str, g: Graph):
    with open(d / f"{name}.vertices", "w", encoding="utf-8") as fh:
        for vid in g.ids:
            fh.write(f"{vid}\n")
    np.savetxt(d / f"{name}.edges", g.edges(), fmt="%d", delimiter="\t")


def _load_graph(d: Path, name: str, directed: bool) -> Graph:
    with open(d / f"{name}.vertices", encoding="utf-8") as fh:
        ids = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
    e = _read_pairs(d / f"{name}.edges")
    return Graph.from_edges(len(ids), e, directed=directed, ids=ids)


def _read_pairs(path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append([int(v) for v in line.split()])
    return np.array(rows, dtype=np.int64).reshape(-1, 2)


def save_checkpoint(path, model: AlignmentModel, ga: Graph, gb: Graph, anchors: AnchorSet,
                    epoch: int, seed: int, extra: dict | None = None):
    d = Path(path)
    (d / "params").mkdir(parents=True, exist_ok=True)
    cfg = model.config
    manifest = {
        "mode": cfg.mode,
        "dim": cfg.dim,
        "layers": cfg.layers,
        "input_dim": cfg.input_dim if cfg.input_dim is not None else "",
        "hidden_dims": ",".join(map(str, cfg.hidden_dims)) if cfg.hidden_dims else "",
        "classifier_hidden": cfg.classifier_hidden or "",
        "init": cfg.init,
        "cross_coupled": int(cfg.cross_coupled),
        "renormalized": int(cfg.renormalized),
        "freeze_h0": int(cfg.freeze_h0),
        "directed_a": int(ga.directed),
        "directed_b": int(gb.directed),
        "seed": seed,
        "epoch": epoch,
        "train_ratio": anchors.ratio,
        "split_seed": anchors.seed,
    }
    for k, v in (extra or {}).items():
        manifest.setdefault(k, v)
    write_kv(d / "manifest.txt", manifest)
    for name, t in model.state_tensors().items():
        write_matrix(d / "params" / f"{name}.tsv", t.value)
    _save_graph(d, "graph_a", ga)
    _save_graph(d, "graph_b", gb)
    for part in ("train", "test"):
        pairs = np.asarray(getattr(anchors, part), dtype=np.int64).reshape(-1, 2)
        np.savetxt(d / f"anchors_{part}.tsv", pairs, fmt="%d", delimiter="\t")


def _opt_int(s):
    return int(s) if s not in ("", "None") else None


def load_checkpoint(path):
    """Return ``(model, graph_a, graph_b, anchor_set, manifest)``."""
    d = Path(path)
    if not (d / "manifest.txt").is_file():
        raise ValidationError(f"{d} is not a checkpoint directory (manifest.txt missing)")
    man = read_kv(d / "manifest.txt")
    cfg = ModelConfig(
        mode=man["mode"],
        dim=int(man["dim"]),
        layers=int(man["layers"]),
        input_dim=_opt_int(man.get("input_dim", "")),
        hidden_dims=[int(v) for v in man["hidden_dims"].split(",")] if man.get("hidden_dims") else None,
        classifier_hidden=_opt_int(man.get("classifier_hidden", "")),
        init=man.get("init", "scaled"),
        cross_coupled=bool(int(man.get("cross_coupled", 1))),
        renormalized=bool(int(man.get("renormalized", 0))),
        freeze_h0=bool(int(man.get("freeze_h0", 0))),
    )
    ga = _load_graph(d, "graph_a", bool(int(man["directed_a"])))
    gb = _load_graph(d, "graph_b", bool(int(man["directed_b"])))
    ka = build_kernel(ga, cfg.directed, cfg.renormalized)
    kb = build_kernel(gb, cfg.directed, cfg.renormalized)
    model = init_model(cfg, ka, kb, int(man["seed"]))
    for name, t in model.state_tensors().items():
        value = read_matrix(d / "params" / f"{name}.tsv")
        if value.shape != t.shape:
            raise ValidationError(f"checkpoint matrix {name} has shape {value.shape}, expected {t.shape}")
        t.value[...] = value
    pairs = {}
    for part in ("train", "test"):
        a = _read_pairs(d / f"anchors_{part}.tsv")
        pairs[part] = [tuple(map(int, p)) for p in a]
    anchors = AnchorSet(pairs["train"], pairs["test"], int(man["split_seed"]), float(man["train_ratio"]))
    return model, ga, gb, anchors, man


def dump_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
