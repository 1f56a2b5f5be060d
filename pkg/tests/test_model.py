import numpy as np
import pytest

from dana.errors import ConfigError, ModeError
from dana.graph import ConvKernel, Graph, build_kernel, build_sym_kernel, synthetic_digraph
from dana.model import (
    DirectedGcnEncoder,
    DomainClassifier,
    GcnEncoder,
    ModelConfig,
    classify_domain,
    encode,
    encode_directed,
    init_model,
)
from dana.objectives import Batch, total_loss
from dana.tensor import Parameter, SparseMatrix, Tape, Tensor, finite_diff_grad

OFF = Tape(enabled=False)


def _eye_kernel(n):
    return ConvKernel(SparseMatrix.identity(n), SparseMatrix.identity(n))


def _path3():
    return build_sym_kernel(Graph.from_edges(3, [(0, 1), (1, 2)], directed=False))


# -- encoders ------------------------------------------------------------------------


def test_encode_identity_composition(rng):
    h0 = rng.uniform(0, 1, (5, 3))
    e = GcnEncoder(Tensor(h0), [Parameter(np.eye(3)), Parameter(np.eye(3))], _eye_kernel(5))
    assert np.array_equal(encode(OFF, e).value, h0)


def test_encode_zero_weight_annihilates(rng):
    e = GcnEncoder(Tensor(rng.normal(size=(3, 2))), [Parameter(np.zeros((2, 4)))], _path3())
    assert np.array_equal(encode(OFF, e).value, np.zeros((3, 4)))


def test_encode_matches_dense_oracle(rng):
    k = _path3()
    w = rng.normal(size=(3, 2))
    e = GcnEncoder(Tensor(np.eye(3)), [Parameter(w)], k)
    oracle = np.maximum(k.forward.to_dense() @ np.eye(3) @ w, 0)
    assert np.max(np.abs(encode(OFF, e).value - oracle)) < 1e-12


def test_directed_identity_kernels_expose_track_order(rng):
    h0 = rng.uniform(0, 1, (4, 2))
    h0r = rng.uniform(0, 1, (4, 2))
    e = DirectedGcnEncoder(Tensor(h0), Tensor(h0r), [Parameter(np.eye(2))], [Parameter(np.eye(2))], _eye_kernel(4))
    # cross coupling: forward track reads the reverse state of the previous layer
    assert np.array_equal(encode_directed(OFF, e).value, np.hstack([h0r, h0]))
    e.cross_coupled = False
    assert np.array_equal(encode_directed(OFF, e).value, np.hstack([h0, h0r]))


def test_directed_reciprocated_graph_has_equal_tracks(rng):
    und = synthetic_digraph(20, seed=2).to_undirected()
    recip = Graph.from_edges(und.n, und.edges(), directed=True)
    k = build_kernel(recip, directed=True)
    h0 = rng.normal(size=(20, 3))
    ws = [rng.normal(size=(3, 3)) for _ in range(3)]
    e = DirectedGcnEncoder(Tensor(h0), Tensor(h0), [Parameter(w) for w in ws], [Parameter(w) for w in ws], k)
    out = encode_directed(OFF, e).value
    assert np.array_equal(out[:, :3], out[:, 3:])


def _dense_two_track(f, fr, h0, h0r, ws, wrs):
    h, hr = h0, h0r
    for w, wr in zip(ws, wrs):
        h, hr = np.maximum(f @ hr @ w, 0), np.maximum(fr @ h @ wr, 0)
    return np.hstack([h, hr])


def test_directed_encoder_matches_dense_oracle(rng):
    g = Graph.from_edges(6, [(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3), (0, 3), (4, 1)], directed=True)
    k = build_kernel(g, directed=True)
    h0, h0r = rng.normal(size=(6, 3)), rng.normal(size=(6, 3))
    ws = [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]
    wrs = [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]
    e = DirectedGcnEncoder(Tensor(h0), Tensor(h0r), [Parameter(w) for w in ws], [Parameter(w) for w in wrs], k)
    oracle = _dense_two_track(k.forward.to_dense(), k.reverse.to_dense(), h0, h0r, ws, wrs)
    assert np.max(np.abs(encode_directed(OFF, e).value - oracle)) < 1e-12


# -- classifier -----------------------------------------------------------------------------


def _clf(w1, b1, w2, b2):
    return DomainClassifier(*(Parameter(np.asarray(v, dtype=float)) for v in (w1, b1, w2, b2)))


def test_classifier_uniform_when_output_layer_is_zero(rng):
    c = _clf(rng.normal(size=(3, 4)), np.zeros((1, 4)), np.zeros((4, 2)), np.zeros((1, 2)))
    p = classify_domain(OFF, c, Tensor(rng.normal(size=(5, 3)))).value
    assert np.array_equal(p, np.full((5, 2), 0.5))


def test_classifier_rows_sum_to_one_and_hand_softmax(rng):
    c = _clf(rng.normal(size=(3, 4)), rng.normal(size=(1, 4)), rng.normal(size=(4, 2)), rng.normal(size=(1, 2)))
    p = classify_domain(OFF, c, Tensor(rng.normal(size=(7, 3)))).value
    assert np.max(np.abs(p.sum(axis=1) - 1)) < 1e-9
    # zero hidden activations leave logits equal to the output bias [ln 3, 0]
    c = _clf(np.zeros((1, 1)), np.zeros((1, 1)), np.zeros((1, 2)), [[np.log(3.0), 0.0]])
    assert np.allclose(classify_domain(OFF, c, Tensor([[2.0]])).value, [[0.75, 0.25]], atol=1e-15)


# -- construction ------------------------------------------------------------------------


def _small_digraph(n=12, seed=0):
    return synthetic_digraph(n, seed=seed, out_degree=2, communities=2)


def _kernels(mode, seed=0):
    ga, gb = _small_digraph(seed=seed), _small_digraph(seed=seed + 1)
    directed = ModelConfig(mode=mode).directed
    return build_kernel(ga, directed), build_kernel(gb, directed)


def test_shared_weights_are_the_same_object():
    ka, kb = _kernels("DANA-S")
    m = init_model(ModelConfig(mode="DANA-S", dim=4, layers=2), ka, kb, seed=0)
    assert all(wa is wb for wa, wb in zip(m.encoder_a.weights, m.encoder_b.weights))
    m.encoder_a.weights[0].value[0, 0] = 42.0
    assert m.encoder_b.weights[0].value[0, 0] == 42.0
    assert m.encoder_a.h0 is not m.encoder_b.h0
    ka, kb = _kernels("DANA-SD")
    m = init_model(ModelConfig(mode="DANA-SD", dim=4, layers=2), ka, kb, seed=0)
    assert all(wa is wb for wa, wb in zip(m.encoder_a.weights_rev, m.encoder_b.weights_rev))


def test_unshared_modes_have_distinct_weights():
    ka, kb = _kernels("DANA")
    m = init_model(ModelConfig(mode="DANA", dim=4, layers=2), ka, kb, seed=0)
    assert m.encoder_a.weights[0] is not m.encoder_b.weights[0]
    assert len(m.parameters()) == len(set(map(id, m.parameters())))


def test_dna_flag_makes_grl_an_identity(rng):
    ka, kb = _kernels("DNA")
    m = init_model(ModelConfig(mode="DNA", dim=4, layers=1), ka, kb, seed=0)
    assert not m.adversarial
    r = Parameter(rng.normal(size=(5, 4)))
    tape = Tape()
    tape.backward(tape.sum(tape.pick(classify_domain(tape, m.classifier, r, adversarial=False), [0] * 5)))
    g_plain = r.grad.copy()
    r.zero_grad()
    tape = Tape()
    tape.backward(tape.sum(tape.pick(classify_domain(tape, m.classifier, r, adversarial=True), [0] * 5)))
    assert np.array_equal(r.grad, -g_plain)


@pytest.mark.parametrize("mode", ["DANA", "DANA-S", "DANA-SD", "DNA", "DNA-S", "MSE-DNA"])
def test_init_is_deterministic(mode):
    ka, kb = _kernels(mode)
    cfg = ModelConfig(mode=mode, dim=4, layers=2)
    s1 = init_model(cfg, ka, kb, seed=11).state_tensors()
    s2 = init_model(cfg, ka, kb, seed=11).state_tensors()
    assert s1.keys() == s2.keys()
    assert all(np.array_equal(s1[k].value, s2[k].value) for k in s1)
    s3 = init_model(cfg, ka, kb, seed=12).state_tensors()
    assert any(not np.array_equal(s1[k].value, s3[k].value) for k in s1)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(mode="nope")
    with pytest.raises(ConfigError):
        ModelConfig(mode="DANA-SD", dim=5)
    with pytest.raises(ConfigError):
        ModelConfig(layers=2, hidden_dims=[3, 3])
    ka, kb = _kernels("DANA")
    with pytest.raises(ModeError):
        init_model(ModelConfig(mode="DANA-SD", dim=4), ka, kb, 0)


def test_widths_and_classifier_default():
    cfg = ModelConfig(mode="DANA-SD", dim=100, layers=3)
    assert cfg.widths() == [50, 50, 50, 50]
    assert ModelConfig(dim=8, layers=2, input_dim=2, hidden_dims=[5]).widths() == [2, 5, 8]
    ka, kb = _kernels("DANA")
    m = init_model(ModelConfig(mode="DANA", dim=6, layers=1), ka, kb, 0)
    assert m.classifier.w1.shape == (6, 6) and m.classifier.w2.shape == (6, 2)


# -- end-to-end gradients on the micro instance -----------------------------------------------

GAMMA, LAM = 0.7, 0.05


def _micro(mode, seed=0):
    ka, kb = _kernels(mode, seed)
    model = init_model(ModelConfig(mode=mode, dim=4, layers=2), ka, kb, seed=seed)
    rng = np.random.default_rng(seed + 100)
    # zero embedding rows would put the classifier exactly on a relu kink
    model.classifier.b1.value[...] = rng.uniform(0.1, 0.5, model.classifier.b1.shape)
    model.classifier.b2.value[...] = rng.normal(size=(1, 2))
    batch = Batch(
        anchors=np.array([[0, 1], [3, 3], [7, 5]]),
        verts_a=rng.integers(0, 12, 10),
        verts_b=rng.integers(0, 12, 10),
        neg_a=rng.integers(0, 12, (3, 2)),
        neg_b=rng.integers(0, 12, (3, 2)),
    )
    return model, batch


def _oracle_value(model, batch, generator_side):
    """Objective whose plain gradient the tape must reproduce for one parameter group."""
    _, rep = total_loss(Tape(enabled=False), model, batch, GAMMA, LAM)
    if not generator_side:
        return GAMMA * rep.domain + LAM * rep.regularization + rep.alignment
    sign = -1.0 if model.adversarial else 0.0
    return rep.alignment + sign * GAMMA * rep.domain + LAM * rep.regularization


@pytest.mark.parametrize("mode", ["DANA", "DANA-S", "DANA-SD", "DNA", "MSE-DNA"])
def test_total_loss_gradient_matches_finite_differences(mode):
    model, batch = _micro(mode)
    tape = Tape()
    for p in model.parameters():
        p.zero_grad()
    loss, _ = total_loss(tape, model, batch, GAMMA, LAM)
    tape.backward(loss)
    gen = {id(p) for p in model.generator_parameters()}
    for p in model.parameters():
        analytic = p.grad.copy()
        base = p.value.copy()

        def f(x, p=p):
            p.value[...] = x
            return _oracle_value(model, batch, id(p) in gen)

        fd = finite_diff_grad(f, base, h=1e-5)
        p.value[...] = base
        err = np.max(np.abs(analytic - fd) / np.maximum(1.0, np.abs(analytic)))
        assert err < 1e-4, f"{p.name}: relative error {err:.2e}"


def test_shared_gradient_is_sum_of_unshared():
    model_s, batch = _micro("DANA-S")
    ka, kb = model_s.encoder_a.kernel, model_s.encoder_b.kernel
    model_u = init_model(ModelConfig(mode="DANA", dim=4, layers=2), ka, kb, seed=0)
    # copy shared values into both unshared encoders
    for enc_u, enc_s in ((model_u.encoder_a, model_s.encoder_a), (model_u.encoder_b, model_s.encoder_b)):
        enc_u.h0.value[...] = enc_s.h0.value
        for wu, ws in zip(enc_u.weights, enc_s.weights):
            wu.value[...] = ws.value
    for a, b in zip(model_u.classifier.parameters(), model_s.classifier.parameters()):
        a.value[...] = b.value
    for m in (model_s, model_u):
        for p in m.parameters():
            p.zero_grad()
        tape = Tape()
        loss, _ = total_loss(tape, m, batch, GAMMA, 0.0)
        tape.backward(loss)
    for ws, wa, wb in zip(model_s.encoder_a.weights, model_u.encoder_a.weights, model_u.encoder_b.weights):
        assert np.max(np.abs(ws.grad - (wa.grad + wb.grad))) < 1e-9


def test_freeze_h0_keeps_input_out_of_parameters():
    ka, kb = _kernels("DNA-S")
    m = init_model(ModelConfig(mode="DNA-S", dim=4, layers=1, freeze_h0=True), ka, kb, 0)
    names = {p.name for p in m.parameters()}
    assert "a.h0" not in names and "b.h0" not in names
    assert {"a.h0", "b.h0"} <= set(m.state_tensors())
