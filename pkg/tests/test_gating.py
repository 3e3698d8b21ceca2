import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from mansr.gating import FixedGate, GateConfig, GateNetwork, combine, fit_gate, fit_gating, gate_examples
from mansr.memory import MemoryConfig, MemoryPrediction, MemoryStore
from mansr.nn import finite_difference_check
from mansr.recommender import ModelConfig, RecommenderModel
from mansr.data import ItemVocabulary


def _triples(rng, n=64, d=6):
    return rng.normal(size=(n, d)), rng.uniform(0, 1, n), rng.uniform(0, 1, n)


class TestGateNetwork:
    def test_gradient_check(self):
        rng = np.random.default_rng(0)
        C, p_n, p_m = _triples(rng, 12)
        gate = GateNetwork(6, hidden=5, init_scale=0.8)
        gate.loss_and_grad(C, p_n, p_m)
        grads = {k: v.copy() for k, v in gate.params.grads.items()}
        err = finite_difference_check(lambda: gate.loss(C, p_n, p_m), gate.params, grads, epsilon=1e-3, rng=rng,
                                      stencil=5, per_tensor=True)
        assert err < 1e-6

    @settings(max_examples=50)
    @given(hnp.arrays(np.float64, (8, 4), elements=st.floats(-1e3, 1e3)), st.integers(0, 100))
    def test_output_in_unit_interval(self, C, seed):
        w = GateNetwork(4, hidden=3, seed=seed, init_scale=2.0).forward(C)
        assert np.all((w >= 0) & (w <= 1))

    def test_step_lowers_loss(self):
        rng = np.random.default_rng(1)
        C, p_n, p_m = _triples(rng)
        gate = GateNetwork(6, hidden=8)
        before = gate.loss(C, p_n, p_m)
        gate.incremental_step(C, p_n, p_m, lr=0.05)
        assert gate.loss(C, p_n, p_m) < before

    def test_zero_lr_noop(self):
        rng = np.random.default_rng(2)
        gate = GateNetwork(6, hidden=8)
        before = gate.params.copy()
        assert gate.incremental_step(*_triples(rng), lr=0.0) is None
        assert gate.params.equal(before)

    def test_state_roundtrip(self):
        gate = GateNetwork(6, hidden=4, seed=3)
        back = GateNetwork.from_state(gate.state_arrays())
        C = np.random.default_rng(3).normal(size=(5, 6))
        np.testing.assert_array_equal(back.forward(C), gate.forward(C))


class TestCombine:
    def test_mixture(self):
        p_n = np.array([0.5, 0.3, 0.2])
        p_m = MemoryPrediction(np.array([2]), np.array([1.0]))
        out, w = combine(p_n.copy(), p_m, 0.7)
        np.testing.assert_allclose(out, [0.35, 0.21, 0.14 + 0.3])
        assert w == 0.7

    def test_empty_memory(self):
        p_n = np.array([0.6, 0.4])
        out, w = combine(p_n, MemoryPrediction.empty(), 0.2)
        assert w == 1.0 and out is p_n

    @settings(max_examples=100)
    @given(
        hnp.arrays(np.float64, 9, elements=st.floats(0.01, 1)),
        st.lists(st.integers(0, 8), min_size=1, max_size=9, unique=True),
        st.floats(0, 1),
    )
    def test_sums_to_one(self, raw_n, support, w):
        p_n = raw_n / raw_n.sum()
        items = np.array(sorted(support))
        probs = np.random.default_rng(len(items)).uniform(0.1, 1, len(items))
        out, _ = combine(p_n.copy(), MemoryPrediction(items, probs / probs.sum()), w)
        assert abs(out.sum() - 1.0) < 1e-9 and np.all(out >= 0)

    def test_fixed_gate(self):
        g = FixedGate(0.7)
        np.testing.assert_array_equal(g.forward(np.zeros((3, 5))), 0.7)
        assert g(np.zeros(5)) == 0.7 and g.incremental_step() is None
        with pytest.raises(ValueError):
            FixedGate(1.5)


class TestFit:
    def test_split_is_seeded(self):
        rng = np.random.default_rng(4)
        C, p_n, p_m = _triples(rng, 100)
        cfg = GateConfig(hidden=4, max_epochs=3, seed=7)
        a, ra = fit_gate(C, p_n, p_m, cfg)
        b, rb = fit_gate(C, p_n, p_m, cfg)
        assert ra.n_train == 90 and ra.n_stop == 10
        assert a.params.equal(b.params) and ra.history == rb.history

    def test_memory_always_right_closes_gate(self):
        rng = np.random.default_rng(5)
        C = rng.normal(size=(400, 6))
        gate, res = fit_gate(C, np.full(400, 0.01), np.ones(400), GateConfig(hidden=8, lr=0.05, max_epochs=60))
        assert gate.forward(C).max() < 0.1
        assert res.history[res.best_epoch]["stop_loss"] == min(h["stop_loss"] for h in res.history)

    def test_separates_contexts(self):
        # neural right when the first coordinate is positive, memory otherwise
        rng = np.random.default_rng(6)
        C = rng.normal(size=(600, 4))
        pos = C[:, 0] > 0
        p_n = np.where(pos, 0.9, 0.01)
        p_m = np.where(pos, 0.01, 0.9)
        gate, _ = fit_gate(C, p_n, p_m, GateConfig(hidden=8, lr=0.02, max_epochs=80))
        w = gate.forward(C)
        assert w[pos].mean() > 0.8 and w[~pos].mean() < 0.2

    def test_empty(self):
        with pytest.raises(ValueError):
            fit_gate(np.zeros((0, 3)), np.zeros(0), np.zeros(0))


def test_gate_examples_replay_order():
    vocab = ItemVocabulary()
    for k in range(5):
        vocab.add(f"i{k}")
    model = RecommenderModel(vocab, ModelConfig(embed_dim=3, hidden=4), seed=0)
    pairs = [([0], 1), ([0], 1), ([2, 3], 4)]
    frozen = MemoryStore(4, MemoryConfig(index_kind="flat"))
    _, _, p_m = gate_examples(model, frozen, pairs, K=5)
    assert p_m.tolist() == [0.0, 0.0, 0.0] and frozen.insert_count == 0

    replay = MemoryStore(4, MemoryConfig(index_kind="flat"))
    C, p_n, p_m = gate_examples(model, replay, pairs, K=5, insert=True)
    # the repeated context finds its own earlier copy
    assert p_m[0] == 0.0 and p_m[1] == 1.0 and replay.insert_count == 3
    assert np.all((p_n > 0) & (p_n < 1)) and C.shape == (3, 4)

    gate, _ = fit_gating(model, MemoryStore(4, MemoryConfig(index_kind="flat")), pairs, 5, GateConfig(hidden=2, max_epochs=2))
    assert gate.input_dim == 4
