"""Training loop, case-study and link-prediction runners."""
from __future__ import annotations

import contextlib
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import dump_json, write_embeddings, write_matrix
from .errors import ConfigError, NumericError, ValidationError
from .evaluation import alignment_metrics, domain_probe, linkpred_metrics
from .graph import AnchorSet, Graph, build_kernel, karate_fixture, split_anchors, twinning_generate
from .model import MODES, AlignmentModel, ModelConfig, init_encoder, init_model, run_encoder
from .objectives import Batch, LossReport, linkpred_loss, total_loss
from .sampling import LogUniformSampler, sample_candidates, sample_uniform_negatives, sample_vertex_batch
from .tensor import Adam, Tape

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "EpochLog",
    "train",
    "evaluate",
    "CaseStudyConfig",
    "run_case_study",
    "LinkPredConfig",
    "run_linkpred",
    "strict_mode",
]


@dataclass
class TrainConfig:
    mode: str = "DANA"
    layers: int = 2
    dim: int = 100
    gamma: float = 1.0
    lam: float = 0.01
    lr: float = 0.001
    batch_vertices: int = 512
    batch_anchors: int | None = None  # None: the full training set every epoch
    candidates: int = 128
    mse_negatives: int = 50
    epochs: int = 500
    seed: int = 0
    train_ratio: float = 0.8
    input_dim: int | None = None
    hidden_dims: list | None = None
    classifier_hidden: int | None = None
    init: str = "scaled"
    cross_coupled: bool = True
    renormalized: bool = False
    freeze_h0: bool = False
    sampler_order: str = "degree"
    sampled_correction: bool = False
    eval_every: int = 25
    eval_ks: tuple = (1, 5, 10, 30, 50)
    early_stop: bool = False
    early_stop_window: int = 25
    early_stop_tol: float = 1e-5
    strict: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {sorted(MODES)}")
        if self.gamma < 0 or self.lam < 0:
            raise ConfigError("gamma and lambda must be non-negative")
        if not 0.0 < self.train_ratio < 1.0:
            raise ConfigError(f"train ratio must lie in (0, 1), got {self.train_ratio}")
        if self.layers < 1 or self.dim < 1:
            raise ConfigError("layers and dim must be >= 1")
        if self.lr <= 0 or self.epochs < 0:
            raise ConfigError("learning rate must be positive and epochs non-negative")
        if self.batch_vertices < 1 or self.candidates < 1 or self.mse_negatives < 1:
            raise ConfigError("batch sizes and sample counts must be >= 1")
        self.eval_ks = tuple(int(k) for k in self.eval_ks)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            mode=self.mode,
            dim=self.dim,
            layers=self.layers,
            input_dim=self.input_dim,
            hidden_dims=self.hidden_dims,
            classifier_hidden=self.classifier_hidden,
            init=self.init,
            cross_coupled=self.cross_coupled,
            renormalized=self.renormalized,
            freeze_h0=self.freeze_h0,
        )

    def manifest(self) -> dict:
        return {
            "gamma": self.gamma,
            "lambda": self.lam,
            "lr": self.lr,
            "epochs": self.epochs,
            "batch_vertices": self.batch_vertices,
            "candidates": self.candidates,
        }


@dataclass
class EpochLog:
    epoch: int
    total: float
    alignment: float
    domain: float
    regularization: float
    seconds: float
    metrics: dict = field(default_factory=dict)

    def record(self, with_time: bool = True) -> dict:
        d = dataclasses.asdict(self)
        if not with_time:
            d.pop("seconds")
        if not self.metrics:
            d.pop("metrics")
        return d


@contextlib.contextmanager
def strict_mode(enabled: bool = True):
    """Pin BLAS to a single thread so reductions run in a fixed order."""
    if not enabled:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - threadpoolctl ships with scikit-learn
        yield
        return
    with threadpool_limits(limits=1):
        yield


def _check_graphs(ga: Graph, gb: Graph, cfg: TrainConfig):
    if MODES[cfg.mode][2] and not (ga.directed and gb.directed):
        raise ConfigError(f"mode {cfg.mode} needs directed input graphs")


def _sampler(g: Graph, cfg: TrainConfig) -> LogUniformSampler:
    return LogUniformSampler(g.degree(), order=cfg.sampler_order)


def _candidates(sampler: LogUniformSampler, count: int, rng, correction: bool):
    if count >= sampler.n:
        return None, None
    cand, tries = sample_candidates(sampler, count, rng, return_tries=True)
    logq = np.log(sampler.expected_count(np.arange(sampler.n), tries)) if correction else None
    return cand, logq


def train(ga: Graph, gb: Graph, anchors: AnchorSet, cfg: TrainConfig, h0_a=None, h0_b=None,
          on_epoch=None) -> tuple[AlignmentModel, list]:
    """Fit an alignment model on the training anchors of ``anchors``.

    Each epoch samples vertex batches for the domain classifier, an anchor
    batch and candidate sets, evaluates the combined objective once and
    takes one Adam step on every parameter. ``on_epoch(epoch_log, model)``
    is called after each step when given.
    """
    _check_graphs(ga, gb, cfg)
    mcfg = cfg.model_config()
    ka = build_kernel(ga, mcfg.directed, mcfg.renormalized)
    kb = build_kernel(gb, mcfg.directed, mcfg.renormalized)
    model = init_model(mcfg, ka, kb, cfg.seed, h0_a, h0_b)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    samp_a, samp_b = _sampler(ga, cfg), _sampler(gb, cfg)
    train_pairs = np.asarray(anchors.train, dtype=np.int64).reshape(-1, 2)
    if train_pairs.shape[0] == 0:
        raise ValidationError("no training anchors")
    opt = Adam(model.parameters(), lr=cfg.lr)
    logs: list[EpochLog] = []
    best_align, since_best = math.inf, 0

    with strict_mode(cfg.strict):
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            verts_a = sample_vertex_batch(ga.n, cfg.batch_vertices, rng)
            verts_b = sample_vertex_batch(gb.n, cfg.batch_vertices, rng)
            if cfg.batch_anchors is None or cfg.batch_anchors >= train_pairs.shape[0]:
                batch_pairs = train_pairs
            else:
                batch_pairs = train_pairs[rng.choice(train_pairs.shape[0], cfg.batch_anchors, replace=False)]
            batch = Batch(batch_pairs, verts_a, verts_b)
            if mcfg.objective == "mse":
                batch.neg_a = sample_uniform_negatives(ga.n, cfg.mse_negatives, batch_pairs[:, 0], rng)
                batch.neg_b = sample_uniform_negatives(gb.n, cfg.mse_negatives, batch_pairs[:, 1], rng)
            else:
                batch.cand_a, batch.logq_a = _candidates(samp_a, cfg.candidates, rng, cfg.sampled_correction)
                batch.cand_b, batch.logq_b = _candidates(samp_b, cfg.candidates, rng, cfg.sampled_correction)

            tape = Tape()
            opt.zero_grad()
            loss, report = total_loss(tape, model, batch, cfg.gamma, cfg.lam)
            if not math.isfinite(report.total):
                where = tape.first_nonfinite() or "loss"
                raise NumericError(f"epoch {epoch}: non-finite loss, first bad tensor {where}")
            tape.backward(loss)
            opt.step()

            entry = EpochLog(epoch, report.total, report.alignment, report.domain, report.regularization,
                             time.perf_counter() - t0)
            if anchors.test and cfg.eval_every and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
                entry.metrics = evaluate(model, anchors.test, cfg.eval_ks)
            logs.append(entry)
            if on_epoch is not None:
                on_epoch(entry, model)

            if cfg.early_stop:
                if report.alignment < best_align - cfg.early_stop_tol:
                    best_align, since_best = report.alignment, 0
                else:
                    since_best += 1
                    if since_best >= cfg.early_stop_window:
                        log.info("early stop at epoch %d", epoch)
                        break
    return model, logs


def evaluate(model: AlignmentModel, pairs, ks=(1, 5, 10, 30, 50)) -> dict:
    ra, rb = model.embeddings()
    return alignment_metrics(ra, rb, pairs, ks)


# -- case study --------------------------------------------------------------


@dataclass
class CaseStudyConfig:
    modes: tuple = ("DANA-S", "DNA-S")
    seeds: tuple = (0, 1, 2, 3, 4)
    dim: int = 10
    epochs: int = 500
    lr: float = 0.01
    gamma: float = 0.1
    lam: float = 0.01
    train_ratio: float = 0.5
    batch_vertices: int = 34
    probe_heldout: float = 0.5
    hits_ks: tuple = (1, 3, 5)
    freeze_h0: bool = False
    classifier_hidden: int | None = None
    init: str = "scaled"


def run_case_study(cfg: CaseStudyConfig | None = None, out=None) -> dict:
    """Train each mode on the mirrored karate twins and collect diagnostics.

    Returns ``{mode: [per-seed result dict, ...], "summary": {...}}``; each
    result carries the first-layer weight matrix, embeddings, probe
    predictions/accuracy and held-out Hits@k. When ``out`` is given every
    array is written as TSV under ``out/<mode>/seed<k>/``.
    """
    cfg = cfg or CaseStudyConfig()
    g, layout = karate_fixture()
    ga, gb, pairs, h0a, h0b = twinning_generate(g, layout)
    bundle: dict = {}
    summary: dict = {}
    for mode in cfg.modes:
        runs = []
        for seed in cfg.seeds:
            anchors = split_anchors(pairs, cfg.train_ratio, seed)
            tcfg = TrainConfig(
                mode=mode, layers=1, dim=cfg.dim, input_dim=2, gamma=cfg.gamma, lam=cfg.lam, lr=cfg.lr,
                batch_vertices=cfg.batch_vertices, epochs=cfg.epochs, seed=seed,
                train_ratio=cfg.train_ratio, freeze_h0=cfg.freeze_h0, eval_every=0,
                classifier_hidden=cfg.classifier_hidden, init=cfg.init,
            )
            model, logs = train(ga, gb, anchors, tcfg, h0a, h0b)
            ra, rb = model.embeddings()
            probe = domain_probe(ra, rb, cfg.probe_heldout, seed)
            metrics = alignment_metrics(ra, rb, anchors.test, cfg.hits_ks)
            runs.append({
                "seed": seed,
                "weights": model.encoder_a.weights[0].value.copy(),
                "emb_a": ra,
                "emb_b": rb,
                "pred_a": probe.predict(ra),
                "pred_b": probe.predict(rb),
                "probe_accuracy": probe.accuracy,
                "metrics": metrics,
                "final_loss": logs[-1].total if logs else float("nan"),
            })
        bundle[mode] = runs
        summary[mode] = {
            "probe_accuracy": float(np.mean([r["probe_accuracy"] for r in runs])),
            **{k: float(np.mean([r["metrics"][k] for r in runs])) for k in runs[0]["metrics"]},
        }
    bundle["summary"] = summary
    if out is not None:
        _export_case_study(Path(out), bundle, g)
    return bundle


def _export_case_study(out: Path, bundle: dict, g: Graph):
    for mode, runs in bundle.items():
        if mode == "summary":
            continue
        for r in runs:
            d = out / mode / f"seed{r['seed']}"
            d.mkdir(parents=True, exist_ok=True)
            write_matrix(d / "W.tsv", r["weights"])
            write_embeddings(d / "embeddings_a.tsv", g.ids, r["emb_a"])
            write_embeddings(d / "embeddings_b.tsv", g.ids, r["emb_b"])
            with open(d / "probe.tsv", "w", encoding="utf-8") as fh:
                fh.write("id\tdomain\tpredicted\n")
                for vid, p in zip(g.ids, r["pred_a"]):
                    fh.write(f"{vid}\tA\t{'AB'[p]}\n")
                for vid, p in zip(g.ids, r["pred_b"]):
                    fh.write(f"{vid}\tB\t{'AB'[p]}\n")
            dump_json(d / "metrics.json", {"probe_accuracy": r["probe_accuracy"], **r["metrics"]})
    dump_json(out / "summary.json", bundle["summary"])


# -- link prediction -----------------------------------------------------------


@dataclass
class LinkPredConfig:
    directed_conv: bool = True
    dim: int = 100
    layers: int = 2
    epochs: int = 300
    lr: float = 0.01
    lam: float = 0.0
    negatives: int = 5
    holdout: float = 0.1
    seed: int = 0
    ks: tuple = (3, 5, 10)
    init: str = "scaled"


def split_edges(g: Graph, holdout: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Random arc split; at least one arc is held out."""
    e = g.edges()
    if not g.directed:
        e = e[e[:, 0] < e[:, 1]]
    if e.shape[0] == 0:
        raise ValidationError("graph has no edges to hold out")
    order = np.random.default_rng(np.random.SeedSequence([seed, 2])).permutation(e.shape[0])
    n_test = max(1, int(round(holdout * e.shape[0])))
    return e[order[n_test:]], e[order[:n_test]]


def run_linkpred(g: Graph, cfg: LinkPredConfig | None = None) -> dict:
    """Train one encoder on 90% of the arcs and score the held-out ones."""
    cfg = cfg or LinkPredConfig()
    if not g.directed:
        raise ConfigError("link prediction runner expects a directed graph")
    train_e, test_e = split_edges(g, cfg.holdout, cfg.seed)
    g_train = Graph.from_edges(g.n, train_e, directed=True, ids=g.ids)
    kernel = build_kernel(g_train, cfg.directed_conv)
    k = cfg.dim // 2 if cfg.directed_conv else cfg.dim
    rng = np.random.default_rng(cfg.seed)
    enc = init_encoder([k] * (cfg.layers + 1), kernel, rng, "enc", directed=cfg.directed_conv, init=cfg.init)
    opt = Adam(enc.parameters(), lr=cfg.lr)
    srng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    with strict_mode(True):
        for _ in range(cfg.epochs):
            neg = sample_uniform_negatives(g.n, cfg.negatives, train_e[:, 0], srng) if g.n > 1 else None
            tape = Tape()
            opt.zero_grad()
            r = run_encoder(tape, enc)
            loss = linkpred_loss(tape, r, train_e, neg.reshape(-1, cfg.negatives))
            if cfg.lam:
                for p in enc.parameters():
                    loss = tape.add(loss, tape.scale(tape.frobenius_sq(p), cfg.lam))
            if not math.isfinite(loss.item()):
                raise NumericError(f"non-finite link-prediction loss at {tape.first_nonfinite()}")
            tape.backward(loss)
            opt.step()
        r = run_encoder(Tape(enabled=False), enc).value
    metrics = linkpred_metrics(r, train_e, test_e, cfg.ks)
    metrics["train_edges"] = int(train_e.shape[0])
    metrics["test_edges"] = int(test_e.shape[0])
    return metrics
