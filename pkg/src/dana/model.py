"""GCN encoders, the adversarial domain classifier and model construction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, ModeError
from .graph import ConvKernel
from .tensor import Parameter, Tape, Tensor

__all__ = [
    "MODES",
    "ModelConfig",
    "GcnEncoder",
    "DirectedGcnEncoder",
    "DomainClassifier",
    "AlignmentModel",
    "encode",
    "encode_directed",
    "classify_domain",
    "init_model",
    "init_encoder",
]

# mode name -> (adversarial, shared, directed, objective)
MODES = {
    "DANA": (True, False, False, "map"),
    "DANA-S": (True, True, False, "map"),
    "DANA-SD": (True, True, True, "map"),
    "DNA": (False, False, False, "map"),
    "DNA-S": (False, True, False, "map"),
    "MSE-DNA": (False, False, False, "mse"),
}


@dataclass
class ModelConfig:
    mode: str = "DANA"
    dim: int = 100  # final per-vertex embedding width (both tracks together when directed)
    layers: int = 2
    input_dim: int | None = None  # width of H0; defaults to the per-track width
    hidden_dims: list | None = None  # k_1..k_{L-1}; default all equal to the per-track width
    classifier_hidden: int | None = None  # default equals ``dim``
    init: str = "scaled"  # "scaled": W ~ N(0, 1/fan_in); "normal": W ~ N(0, 1)
    cross_coupled: bool = True
    renormalized: bool = False
    freeze_h0: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {sorted(MODES)}")
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.dim < 1 or (self.input_dim is not None and self.input_dim < 1):
            raise ConfigError("dimensions must be positive")
        if self.directed and self.dim % 2:
            raise ConfigError(f"directed modes need an even dim, got {self.dim}")
        if self.init not in ("scaled", "normal"):
            raise ConfigError(f"unknown init scheme {self.init!r}")
        if self.hidden_dims is not None and len(self.hidden_dims) != self.layers - 1:
            raise ConfigError(f"need {self.layers - 1} hidden widths, got {len(self.hidden_dims)}")

    @property
    def adversarial(self) -> bool:
        return MODES[self.mode][0]

    @property
    def shared(self) -> bool:
        return MODES[self.mode][1]

    @property
    def directed(self) -> bool:
        return MODES[self.mode][2]

    @property
    def objective(self) -> str:
        return MODES[self.mode][3]

    @property
    def track_dim(self) -> int:
        return self.dim // 2 if self.directed else self.dim

    def widths(self) -> list[int]:
        """Layer widths ``k_0, ..., k_L`` of one propagation track."""
        k = self.track_dim
        hidden = list(self.hidden_dims) if self.hidden_dims is not None else [k] * (self.layers - 1)
        return [self.input_dim or k, *hidden, k]


@dataclass
class GcnEncoder:
    h0: Tensor
    weights: list
    kernel: ConvKernel

    @property
    def layers(self) -> int:
        return len(self.weights)

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> list:
        ps = [self.h0] if isinstance(self.h0, Parameter) else []
        return ps + list(self.weights)


@dataclass
class DirectedGcnEncoder:
    h0: Tensor
    h0_rev: Tensor
    weights: list
    weights_rev: list
    kernel: ConvKernel
    cross_coupled: bool = True

    @property
    def layers(self) -> int:
        return len(self.weights)

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1] + self.weights_rev[-1].shape[1]

    def parameters(self) -> list:
        ps = [h for h in (self.h0, self.h0_rev) if isinstance(h, Parameter)]
        return ps + list(self.weights) + list(self.weights_rev)


@dataclass
class DomainClassifier:
    w1: Parameter
    b1: Parameter
    w2: Parameter
    b2: Parameter

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    def parameters(self) -> list:
        return [self.w1, self.b1, self.w2, self.b2]


def encode(tape: Tape, e: GcnEncoder) -> Tensor:
    """Run ``H_l = relu(F H_{l-1} W_l)`` for every layer and return ``H_L``."""
    F = e.kernel.forward
    if F.rows != e.h0.shape[0]:
        raise DimensionError(f"kernel of size {F.rows} does not match H0 with {e.h0.shape[0]} rows")
    h = e.h0
    for w in e.weights:
        h = tape.relu(tape.matmul(tape.spmm(F, h), w))
    return h


def encode_directed(tape: Tape, e: DirectedGcnEncoder) -> Tensor:
    """Two-track propagation over out- and in-neighbourhoods.

    With cross-coupling the out track at layer ``l`` consumes the in track
    of layer ``l-1`` and vice versa. The result is ``[H_L | H~_L]``.
    """
    F, Fr = e.kernel.forward, e.kernel.reverse
    if Fr is None:
        raise ModeError("directed encoder needs a reverse kernel")
    if F.rows != e.h0.shape[0]:
        raise DimensionError(f"kernel of size {F.rows} does not match H0 with {e.h0.shape[0]} rows")
    h, h_rev = e.h0, e.h0_rev
    for w, w_rev in zip(e.weights, e.weights_rev):
        src, src_rev = (h_rev, h) if e.cross_coupled else (h, h_rev)
        h, h_rev = (
            tape.relu(tape.matmul(tape.spmm(F, src), w)),
            tape.relu(tape.matmul(tape.spmm(Fr, src_rev), w_rev)),
        )
    return tape.concat_cols(h, h_rev)


def run_encoder(tape: Tape, e) -> Tensor:
    if isinstance(e, DirectedGcnEncoder):
        return encode_directed(tape, e)
    return encode(tape, e)


def classify_domain(tape: Tape, c: DomainClassifier, r: Tensor, adversarial: bool = True) -> Tensor:
    """Row-wise domain probabilities ``softmax(relu(grl(r) W1 + b1) W2 + b2)``."""
    if r.shape[1] != c.in_dim:
        raise DimensionError(f"classifier expects {c.in_dim} features, got {r.shape[1]}")
    x = tape.grl(r, reverse=adversarial)
    hidden = tape.relu(tape.add_row(tape.matmul(x, c.w1), c.b1))
    logits = tape.add_row(tape.matmul(hidden, c.w2), c.b2)
    return tape.softmax_rows(logits)


@dataclass
class AlignmentModel:
    config: ModelConfig
    encoder_a: object
    encoder_b: object
    classifier: DomainClassifier
    meta: dict = field(default_factory=dict)

    @property
    def adversarial(self) -> bool:
        return self.config.adversarial

    @property
    def shared(self) -> bool:
        return self.config.shared

    @property
    def directed(self) -> bool:
        return self.config.directed

    def embed(self, tape: Tape) -> tuple[Tensor, Tensor]:
        return run_encoder(tape, self.encoder_a), run_encoder(tape, self.encoder_b)

    def embeddings(self) -> tuple[np.ndarray, np.ndarray]:
        """Forward pass without recording; returns plain arrays."""
        ra, rb = self.embed(Tape(enabled=False))
        return ra.value, rb.value

    def generator_parameters(self) -> list:
        return _unique(self.encoder_a.parameters() + self.encoder_b.parameters())

    def parameters(self) -> list:
        return _unique(self.generator_parameters() + self.classifier.parameters())

    def state_tensors(self) -> dict:
        """Every stored matrix by name, frozen H0 included; shared ones appear once."""
        out = {}
        for enc in (self.encoder_a, self.encoder_b):
            for h in (enc.h0, getattr(enc, "h0_rev", None)):
                if h is not None:
                    out[h.name] = h
        for p in self.parameters():
            out[p.name] = p
        return out


def _unique(ps):
    seen, out = set(), []
    for p in ps:
        if id(p) not in seen:
            seen.add(id(p))
            out.append(p)
    return out


def _weight(rng, fan_in, fan_out, scheme, name):
    std = np.sqrt(1.0 / fan_in) if scheme == "scaled" else 1.0
    return Parameter(rng.normal(0.0, std, size=(fan_in, fan_out)), name=name)


def _h0(rng, n, k, given, freeze, name):
    if given is not None:
        given = np.asarray(given, dtype=np.float64)
        if given.shape != (n, k):
            raise DimensionError(f"{name} must have shape {(n, k)}, got {given.shape}")
        value = given.copy()
    else:
        value = rng.normal(0.0, 1.0, size=(n, k))
    if freeze:
        return Tensor(value, requires_grad=False, name=name)
    return Parameter(value, name=name)


def init_encoder(widths, kernel: ConvKernel, rng: np.random.Generator, prefix: str, *,
                 directed: bool = False, init: str = "scaled", freeze_h0: bool = False,
                 cross_coupled: bool = True, h0=None, h0_rev=None, weights=None, weights_rev=None):
    """Create one encoder with layer widths ``k_0..k_L`` per track.

    ``weights``/``weights_rev`` pass in existing matrices to share them.
    """
    n = kernel.n
    layers = len(widths) - 1
    if directed and kernel.reverse is None:
        raise ModeError("directed encoder needs a kernel with a reverse operator")
    h = _h0(rng, n, widths[0], h0, freeze_h0, f"{prefix}.h0")
    if weights is None:
        weights = [_weight(rng, widths[i], widths[i + 1], init, f"{prefix}.w{i + 1}") for i in range(layers)]
    if not directed:
        return GcnEncoder(h, weights, kernel)
    hr = _h0(rng, n, widths[0], h0_rev, freeze_h0, f"{prefix}.h0_rev")
    if weights_rev is None:
        weights_rev = [
            _weight(rng, widths[i], widths[i + 1], init, f"{prefix}.w{i + 1}_rev") for i in range(layers)
        ]
    return DirectedGcnEncoder(h, hr, weights, weights_rev, kernel, cross_coupled)


def init_model(cfg: ModelConfig, kernel_a: ConvKernel, kernel_b: ConvKernel, seed: int,
               h0_a=None, h0_b=None) -> AlignmentModel:
    """Randomly initialise an alignment model for the configured mode.

    H0 entries are standard normal unless given explicitly. Weight matrices
    follow ``cfg.init``. Shared modes reuse encoder A's weight objects in
    encoder B; H0 stays per network.
    """
    if cfg.directed and (kernel_a.reverse is None or kernel_b.reverse is None):
        raise ModeError(f"mode {cfg.mode} needs directed kernels for both networks")
    rng = np.random.default_rng(seed)
    opts = dict(directed=cfg.directed, init=cfg.init, freeze_h0=cfg.freeze_h0, cross_coupled=cfg.cross_coupled)
    widths = cfg.widths()
    if cfg.shared:
        enc_a = init_encoder(widths, kernel_a, rng, "shared", h0=h0_a, **opts)
        enc_a.h0.name = "a.h0"
        if cfg.directed:
            enc_a.h0_rev.name = "a.h0_rev"
        enc_b = init_encoder(
            widths, kernel_b, rng, "b", h0=h0_b, weights=enc_a.weights,
            weights_rev=getattr(enc_a, "weights_rev", None), **opts,
        )
    else:
        enc_a = init_encoder(widths, kernel_a, rng, "a", h0=h0_a, **opts)
        enc_b = init_encoder(widths, kernel_b, rng, "b", h0=h0_b, **opts)
    k = cfg.dim
    h = cfg.classifier_hidden or k
    std = (lambda fan: np.sqrt(1.0 / fan)) if cfg.init == "scaled" else (lambda fan: 1.0)
    clf = DomainClassifier(
        Parameter(rng.normal(0.0, std(k), size=(k, h)), name="clf.w1"),
        Parameter(np.zeros((1, h)), name="clf.b1"),
        Parameter(rng.normal(0.0, std(h), size=(h, 2)), name="clf.w2"),
        Parameter(np.zeros((1, 2)), name="clf.b2"),
    )
    return AlignmentModel(cfg, enc_a, enc_b, clf)
