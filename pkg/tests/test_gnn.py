import math

import numpy as np
import pytest

from conftest import central_difference, relative_error
from diagfusion.embedding import build_vocabulary, EmbeddingModel
from diagfusion.errors import ModelFormatError
from diagfusion.events import LOG, Event, EventSequence
from diagfusion.gnn import (DependencyGraph, GnnModel, GnnParams, build_dependency_graph, forward,
                            forward_features, heads, hop_features, instance_representation, joint_loss,
                            load_model, loss_and_gradients, readout, save_model, tagconv_forward, train_gnn)
from diagfusion.telemetry import DeploymentMap, TraceSpan


def call(a, b):
    return TraceSpan(0, a, b, 1.0, "200")


def dep(hosts):
    return DeploymentMap(host_of=dict(hosts), group_of={i: i[0] for i in hosts})


def test_single_call_edge():
    g = build_dependency_graph([call("A", "B")], dep({"A": "h1", "B": "h2"}))
    assert g.adjacency.tolist() == [[0, 1], [1, 0]]


def test_co_deployment_edge():
    g = build_dependency_graph([], dep({"A": "h", "C": "h"}))
    assert g.adjacency.tolist() == [[0, 1], [1, 0]]


def test_four_node_topology():
    g = build_dependency_graph([call("A", "B"), call("B", "C"), call("B", "B")],
                               dep({"A": "h1", "B": "h2", "C": "h3", "D": "h1"}))
    assert np.count_nonzero(g.adjacency) == 6
    assert (np.diag(g.adjacency) == 0).all() and (g.adjacency == g.adjacency.T).all()
    expected = np.zeros((4, 4))
    for a, b in [(0, 1), (1, 2), (0, 3)]:
        expected[a, b] = expected[b, a] = 1
    assert np.array_equal(g.adjacency, expected)


def test_normalized_adjacency():
    adj = np.array([[0, 1, 1, 0], [1, 0, 0, 0], [1, 0, 0, 0], [0, 0, 0, 0]], dtype=float)
    a_hat = DependencyGraph(list("ABCD"), adj).normalized_adjacency
    s = 1 / math.sqrt(2)
    assert np.allclose(a_hat, [[0, s, s, 0], [s, 0, 0, 0], [s, 0, 0, 0], [0, 0, 0, 0]], atol=1e-15)
    assert np.array_equal(a_hat, a_hat.T) and not a_hat[3].any()


def toy_embedding(vectors):
    tokens = list(vectors)
    vocab = build_vocabulary([tokens])
    w = np.zeros((len(vocab), 2))
    for t, v in vectors.items():
        w[vocab.get(t)] = v
    return EmbeddingModel(vocab, w, np.zeros((2, 2)), ["a", "b"])


def events(*tokens):
    return [Event(LOG, 0, "x", (0,), t) for t in tokens]


def test_instance_representation():
    emb = toy_embedding({"L:1": [1.0, 0.0], "L:2": [0.0, 1.0]})
    assert np.array_equal(instance_representation([], emb), np.zeros(2))
    assert np.array_equal(instance_representation(["L:1"], emb), [1.0, 0.0])
    assert np.array_equal(instance_representation(EventSequence("x", "c", events("L:1", "L:2")), emb), [0.5, 0.5])


def model_with(thetas, w_s=None, w_t=None, b_s=None, b_t=None):
    thetas = np.asarray(thetas, dtype=float)
    h = thetas.shape[2]
    w_s = np.zeros((h, 2)) if w_s is None else np.asarray(w_s, float)
    w_t = np.zeros((h, 2)) if w_t is None else np.asarray(w_t, float)
    b_s = np.zeros(w_s.shape[1]) if b_s is None else np.asarray(b_s, float)
    b_t = np.zeros(w_t.shape[1]) if b_t is None else np.asarray(b_t, float)
    return GnnModel(thetas, w_s, b_s, w_t, b_t, [f"g{k}" for k in range(w_s.shape[1])],
                    [f"t{k}" for k in range(w_t.shape[1])])


def path2():
    return DependencyGraph(["A", "B"], np.array([[0.0, 1.0], [1.0, 0.0]]))


def test_k0_reduces_to_relu_x_theta():
    rng = np.random.default_rng(0)
    g = build_dependency_graph([call("A", "B"), call("B", "C")], dep({"A": "1", "B": "2", "C": "3"}))
    x, theta = rng.normal(size=(3, 4)), rng.normal(size=(1, 4, 5))
    assert np.abs(tagconv_forward(g, x, model_with(theta)) - np.maximum(x @ theta[0], 0)).max() < 1e-12


def test_isolated_node_sees_only_itself():
    rng = np.random.default_rng(1)
    g = build_dependency_graph([call("A", "B")], dep({"A": "1", "B": "2", "C": "3"}))
    x, thetas = rng.normal(size=(3, 4)), rng.normal(size=(3, 4, 5))
    h = tagconv_forward(g, x, model_with(thetas))
    assert np.abs(h[2] - np.maximum(x[2] @ thetas[0], 0)).max() < 1e-12


def test_two_node_hand_example():
    eye = np.eye(2)
    h = tagconv_forward(path2(), eye, model_with([eye, eye]))
    assert np.abs(h - np.ones((2, 2))).max() < 1e-12


def test_higher_hops_with_zero_weights_match_k0():
    rng = np.random.default_rng(2)
    g = DependencyGraph(list("ABCD"), (rng.random((4, 4)) < 0.5).astype(float))
    g.adjacency = np.triu(g.adjacency, 1) + np.triu(g.adjacency, 1).T
    x, theta0 = rng.normal(size=(4, 3)), rng.normal(size=(3, 2))
    full = model_with(np.stack([theta0, np.zeros((3, 2)), np.zeros((3, 2))]))
    assert np.array_equal(tagconv_forward(g, x, full), tagconv_forward(g, x, model_with(theta0[None])))


def test_shape_mismatch_raises():
    with pytest.raises(ValueError, match="shape"):
        tagconv_forward(path2(), np.zeros((3, 2)), model_with(np.zeros((1, 2, 2))))


def test_zero_features_give_softmax_of_biases():
    m = model_with(np.ones((2, 2, 3)), w_s=np.ones((3, 2)), b_s=[0.0, math.log(3)], b_t=[1.0, 1.0])
    p_s, p_t = forward_features(path2(), np.zeros((2, 2)), m)
    assert np.allclose(p_s, [0.25, 0.75], atol=1e-15) and np.allclose(p_t, [0.5, 0.5], atol=1e-15)


def test_two_node_forward_oracle():
    x = np.array([[1.0, -2.0], [0.5, 3.0]])
    theta = np.array([[[1.0, 0.0, 2.0], [0.5, -1.0, 0.0]], [[0.0, 1.0, -1.0], [1.0, 0.5, 0.25]]])
    w_s = np.array([[1.0, -1.0], [0.5, 0.5], [-0.25, 2.0]])
    w_t = np.array([[0.0, 1.0], [1.0, 0.0], [0.5, 0.5]])
    b_s, b_t = np.array([0.1, -0.1]), np.array([0.0, 0.3])
    m = model_with(theta, w_s, w_t, b_s, b_t)
    # independent hand arithmetic: A_hat swaps the two rows
    swapped = x[::-1]
    z = x @ theta[0] + swapped @ theta[1]
    z = np.where(z > 0, z, 0.0)
    r = np.array([max(z[0, j], z[1, j]) for j in range(3)])
    ls, lt = r @ w_s + b_s, r @ w_t + b_t
    ps = np.exp(ls) / np.exp(ls).sum()
    pt = np.exp(lt) / np.exp(lt).sum()
    p_s, p_t = forward_features(path2(), x, m)
    assert np.abs(p_s - ps).max() < 1e-12 and np.abs(p_t - pt).max() < 1e-12
    assert abs(p_s.sum() - 1) < 1e-9 and abs(p_t.sum() - 1) < 1e-9


def test_readout_permutation_invariance():
    rng = np.random.default_rng(3)
    n = 6
    adj = np.triu((rng.random((n, n)) < 0.4).astype(float), 1)
    adj = adj + adj.T
    g = DependencyGraph([f"n{i}" for i in range(n)], adj)
    m = model_with(rng.normal(size=(3, 4, 5)), rng.normal(size=(5, 3)), rng.normal(size=(5, 2)))
    x = rng.normal(size=(n, 4))
    r = readout(tagconv_forward(g, x, m))
    for _ in range(100):
        perm = rng.permutation(n)
        gp = DependencyGraph([g.nodes[i] for i in perm], adj[np.ix_(perm, perm)])
        rp = readout(tagconv_forward(gp, x[perm], m))
        assert np.abs(rp - r).max() < 1e-12


def test_heads_argmax_invariant_to_logit_shift():
    rng = np.random.default_rng(4)
    m = model_with(np.zeros((1, 2, 3)), rng.normal(size=(3, 4)), rng.normal(size=(3, 3)))
    r = rng.normal(size=3)
    p_s, p_t = heads(r, m)
    m.b_s = m.b_s + 7.5
    q_s, _ = heads(r, m)
    assert np.argmax(p_s) == np.argmax(q_s) and np.allclose(p_s, q_s)


def test_joint_loss_values():
    assert joint_loss([1.0, 0.0], [0.0, 1.0], [1, 0], [0, 1]) == 0.0
    assert abs(joint_loss([0.5, 0.5], [0.5, 0.5], [1, 0], [0, 1]) - 2 * math.log(2)) < 1e-12
    ps, pt = np.array([[0.7, 0.3], [0.2, 0.8]]), np.array([[0.6, 0.4], [0.1, 0.9]])
    ys, yt = np.array([[1, 0], [0, 1]]), np.array([[0, 1], [0, 1]])
    ce = lambda p, y: -np.mean(np.sum(y * np.log(p), axis=1))
    assert abs(joint_loss(ps, pt, ys, yt) - (ce(ps, ys) + ce(pt, yt))) < 1e-12
    assert np.isfinite(joint_loss([0.0, 1.0], [1.0, 0.0], [1, 0], [0, 1]))


def gnn_batch(seed, n=3, f=4, d=3, hops=2, hidden=5, s=3, t=2):
    rng = np.random.default_rng(seed)
    adj = np.triu((rng.random((n, n)) < 0.6).astype(float), 1)
    adj = adj + adj.T
    a_hat = DependencyGraph([str(i) for i in range(n)], adj).normalized_adjacency
    x = rng.normal(size=(f, n, d))
    hop_x = np.stack([hop_features(a_hat, xi, hops) for xi in x])
    m = model_with(rng.normal(size=(hops + 1, d, hidden)), rng.normal(size=(hidden, s)),
                   rng.normal(size=(hidden, t)), rng.normal(size=s), rng.normal(size=t))
    return m, hop_x, rng.integers(0, s, f), rng.integers(0, t, f)


@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(seed):
    m, hop_x, y_s, y_t = gnn_batch(seed)
    _, grads = loss_and_gradients(m, hop_x, y_s, y_t)
    f = lambda: loss_and_gradients(m, hop_x, y_s, y_t)[0]
    for name, w in m.params().items():
        assert relative_error(grads[name], central_difference(f, w)) < 1e-4, name


def test_loss_matches_forward():
    m, hop_x, y_s, y_t = gnn_batch(5)
    loss, _ = loss_and_gradients(m, hop_x, y_s, y_t)
    p = [heads(readout(np.maximum(sum(hx[k] @ m.thetas[k] for k in range(3)), 0)), m) for hx in hop_x]
    ps, pt = np.array([a for a, _ in p]), np.array([b for _, b in p])
    assert abs(loss - joint_loss(ps, pt, np.eye(3)[y_s], np.eye(2)[y_t])) < 1e-12


def toy_cases():
    """Root instance A or B carries the failure token."""
    emb = toy_embedding({"L:1": [1.0, 0.0], "L:2": [0.0, 1.0], "L:3": [0.3, 0.3]})
    cases = []
    for k in range(8):
        root = "A" if k % 2 else "B"
        tok = "L:1" if k % 4 < 2 else "L:2"
        seqs = [EventSequence(i, f"c{k}", events(tok) if i == root else events("L:3")) for i in ("A", "B")]
        cases.append(("a" if root == "A" else "b", "cpu" if tok == "L:1" else "mem", seqs))
    return emb, cases


def test_training_loss_decreases_and_is_seeded():
    emb, cases = toy_cases()
    params = GnnParams(hidden=8, epochs=10)
    a = train_gnn(cases, path2(), emb, ["a", "b"], params=params, seed=1)
    assert a.loss_history[-1] < a.loss_history[0]
    b = train_gnn(cases, path2(), emb, ["a", "b"], params=params, seed=1)
    assert all(np.array_equal(a.params()[k], b.params()[k]) for k in a.params())


def test_unknown_group_label_rejected():
    emb, cases = toy_cases()
    with pytest.raises(ValueError, match="unknown service group"):
        train_gnn(cases, path2(), emb, ["a"], params=GnnParams(epochs=1))


def test_forward_node_mismatch():
    emb, cases = toy_cases()
    m = train_gnn(cases, path2(), emb, ["a", "b"], params=GnnParams(hidden=4, epochs=2))
    with pytest.raises(ValueError, match="no event sequence"):
        forward(path2(), cases[0][2][:1], m, emb)


def test_save_load_round_trip(tmp_path):
    emb, cases = toy_cases()
    m = train_gnn(cases, path2(), emb, ["a", "b"], params=GnnParams(hidden=4, epochs=5))
    save_model(m, tmp_path / "g.json")
    again = load_model(tmp_path / "g.json")
    save_model(again, tmp_path / "g2.json")
    assert (tmp_path / "g.json").read_bytes() == (tmp_path / "g2.json").read_bytes()
    for k in m.params():
        assert np.array_equal(m.params()[k], again.params()[k])
    for _, _, seqs in cases:
        a, b = forward(path2(), seqs, m, emb), forward(path2(), seqs, again, emb)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_load_rejects_wrong_version_and_corruption(tmp_path):
    m = model_with(np.zeros((1, 2, 2)))
    doc = m.to_dict()
    doc["version"] = 2
    with pytest.raises(ModelFormatError, match="version"):
        GnnModel.from_dict(doc)
    doc = m.to_dict()
    doc["hidden"] = 7
    with pytest.raises(ModelFormatError, match="shapes"):
        GnnModel.from_dict(doc)
    (tmp_path / "x.json").write_text("not json")
    with pytest.raises(ModelFormatError):
        load_model(tmp_path / "x.json")
