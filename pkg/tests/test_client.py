import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import f64, max_rel_err
from feddymem.client import (
    ClientDataset,
    ClientModelState,
    LossConfig,
    MemoryBank,
    client_update,
    extract_all_memories,
    forward_memory,
    init_adam_states,
    knn_lookup,
    max_patch_norm,
    memory_reduce,
    metric_loss,
    named_params,
)
from feddymem.errors import ShapeError
from feddymem.features import init_projection
from feddymem.generator import init_generator
from feddymem.numerics import Rng, finite_diff_grad, pairwise_dist


def make_bank(rng, h=4, w=4, c=3, round_index=0):
    return MemoryBank(data=rng.normal((h, w, c)).astype(np.float64), round_index=round_index)


def make_state(seed=0, cin=6, c=3, cfg=None):
    rng = Rng(seed)
    state = ClientModelState(
        client_id=0,
        projection=init_projection(rng.child("p"), cin, c),
        generator=init_generator(rng.child("g"), c, (4, 4)),
        adam={},
    )
    init_adam_states(state, cfg or LossConfig())
    return state


class TestKnn:
    def test_exact_hit(self, rng):
        bank = make_bank(rng)
        idx, dist = knn_lookup(bank.patches[5:6].copy(), bank, 1)
        assert idx[0, 0] == 5 and dist[0, 0] == 0.0

    def test_hand_distances(self):
        bank = MemoryBank(data=np.array([0.0, 10.0], dtype=np.float32).reshape(1, 2, 1))
        idx, dist = knn_lookup(np.array([[4.0]]), bank, 2)
        assert idx[0].tolist() == [0, 1]
        assert dist[0].tolist() == [4.0, 6.0]

    def test_matches_full_sort_oracle(self, rng):
        patches = f64(rng.child(1), (20, 4))
        bank = MemoryBank(data=f64(rng.child(2), (8, 8, 4)))
        idx, dist = knn_lookup(patches, bank, 3)
        d = pairwise_dist(patches, bank.patches)
        oracle = np.argsort(d, axis=1)[:, :3]
        assert np.array_equal(idx, oracle)
        assert max_rel_err(dist, np.take_along_axis(d, oracle, axis=1)) < 1e-12

    def test_tie_breaks_to_lower_index(self):
        data = np.zeros((1, 3, 1), dtype=np.float32)
        bank = MemoryBank(data=data)
        idx, _ = knn_lookup(np.zeros((1, 1)), bank, 2)
        assert idx[0].tolist() == [0, 1]

    def test_k_too_large(self, rng):
        bank = make_bank(rng)
        with pytest.raises(ValueError):
            knn_lookup(bank.patches, bank, bank.size + 1)


class TestMetricLoss:
    def test_zero_when_patches_coincide(self, rng):
        bank = make_bank(rng)
        m = bank.data.copy()
        cfg = LossConfig(knn_k=1)
        loss, grad = metric_loss(m, bank, cfg)
        assert loss == 0.0
        assert not grad.any()

    def test_hand_evaluated_hinge(self):
        bank = MemoryBank(data=np.zeros((1, 1, 1), dtype=np.float32))
        m = np.full((1, 1, 1), 1.01)
        loss, grad = metric_loss(m, bank, LossConfig(hinge_margin=0.01, knn_k=1))
        assert loss == pytest.approx(1.0, abs=1e-7)
        assert grad[0, 0, 0] == pytest.approx(1.0, abs=1e-7)

    def test_matches_brute_force_oracle(self, rng):
        cfg = LossConfig(hinge_margin=0.05, knn_k=2)
        m = f64(rng.child(1), (1, 2, 3))
        bank = MemoryBank(data=f64(rng.child(2), (2, 3, 3)))
        loss, _ = metric_loss(m, bank, cfg)
        expected = 0.0
        for patch in m.reshape(2, 3):
            dists = sorted(np.linalg.norm(patch - q) for q in bank.patches)
            expected += sum(max(0.0, d - cfg.hinge_margin) for d in dists[:2])
        expected /= 2 * 2
        assert loss == pytest.approx(expected, rel=1e-9)

    def test_loss_nonnegative_and_bounded(self, rng):
        for seed in range(10):
            m = Rng(seed).normal((3, 3, 4)).astype(np.float64)
            bank = make_bank(Rng(seed + 100), 4, 4, 4)
            cfg = LossConfig(hinge_margin=0.01, knn_k=3)
            loss, _ = metric_loss(m, bank, cfg)
            r_hat = max(max_patch_norm(m), max_patch_norm(bank.data))
            assert 0.0 <= loss <= 2.0 * r_hat

    def test_gradient_matches_finite_differences(self, rng):
        cfg = LossConfig(hinge_margin=0.05, knn_k=2)
        bank = make_bank(rng.child(1), 3, 3, 3)
        for attempt in range(20):
            m = Rng(500 + attempt).normal((2, 2, 3)).astype(np.float64)
            _, dist = knn_lookup(m.reshape(4, 3), bank, cfg.knn_k + 1)
            # exclude points near the hinge kink or a KNN tie
            if np.abs(dist - cfg.hinge_margin).min() < 1e-3:
                continue
            if np.abs(dist[:, -1] - dist[:, -2]).min() < 1e-3:
                continue
            loss, grad = metric_loss(m, bank, cfg)
            fd = finite_diff_grad(lambda v: metric_loss(v, bank, cfg)[0], m, 1e-5)
            assert max_rel_err(grad, fd) < 1e-3
            return
        pytest.fail("no kink-free sample found")

    def test_invariant_under_bank_permutation(self, rng):
        m = f64(rng.child(1), (3, 3, 4))
        bank = make_bank(rng.child(2), 4, 4, 4)
        perm = Rng(9).permutation(bank.size)
        shuffled = MemoryBank(data=bank.patches[perm].reshape(bank.data.shape))
        cfg = LossConfig(knn_k=3)
        assert metric_loss(m, bank, cfg)[0] == pytest.approx(
            metric_loss(m, shuffled, cfg)[0], rel=1e-9)


def _tiny_dataset(state, n=6, seed=3):
    rng = Rng(seed)
    fused = [rng.child(i).normal((4, 4, 6)).astype(np.float32) for i in range(n)]
    return ClientDataset(fused=fused, sample_ids=[f"s{i}" for i in range(n)])


class TestClientUpdate:
    def test_zero_epochs_is_identity(self):
        cfg = LossConfig(local_epochs=0)
        state = make_state(cfg=cfg)
        state.local_bank = make_bank(Rng(5), 4, 4, 3)
        before = {k: v.copy() for k, v in named_params(state).items()}
        losses, grads = client_update(state, _tiny_dataset(state), cfg, 1, Rng(0))
        assert losses == [] and grads == []
        for k, v in named_params(state).items():
            assert np.array_equal(v, before[k])

    def test_training_reduces_loss(self):
        cfg = LossConfig(batch_size=3, learning_rate=5e-3)
        state = make_state(cfg=cfg)
        state.local_bank = make_bank(Rng(5), 4, 4, 3)
        data = _tiny_dataset(state, n=8)
        first = None
        for t in range(1, 9):
            losses, _ = client_update(state, data, cfg, t, Rng(1).child("u"))
            if first is None:
                first = losses[0]
        assert losses[-1] < first

    def test_deterministic_across_runs(self):
        cfg = LossConfig(batch_size=2)
        results = []
        for _ in range(2):
            state = make_state(cfg=cfg)
            state.local_bank = make_bank(Rng(5), 4, 4, 3)
            client_update(state, _tiny_dataset(state), cfg, 1, Rng(7).child("x"))
            results.append({k: v.copy() for k, v in named_params(state).items()})
        for k in results[0]:
            assert np.array_equal(results[0][k], results[1][k])

    def test_trace_length(self):
        cfg = LossConfig(batch_size=4, local_epochs=2)
        state = make_state(cfg=cfg)
        state.local_bank = make_bank(Rng(5), 4, 4, 3)
        losses, grads = client_update(state, _tiny_dataset(state, n=6), cfg, 1, Rng(0))
        assert len(losses) == len(grads) == 2 * 2  # 2 epochs x ceil(6/4)

    def test_empty_dataset_rejected(self):
        cfg = LossConfig()
        state = make_state(cfg=cfg)
        state.local_bank = make_bank(Rng(5), 4, 4, 3)
        with pytest.raises(ValueError):
            client_update(state, ClientDataset(fused=[]), cfg, 1, Rng(0))


class TestExtractAllMemories:
    def test_singleton(self):
        state = make_state()
        data = _tiny_dataset(state, n=1)
        assert len(extract_all_memories(state, data)) == 1

    def test_pure_repeated_calls(self):
        state = make_state()
        data = _tiny_dataset(state, n=3)
        a = extract_all_memories(state, data)
        b = extract_all_memories(state, data)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_matches_per_sample_forward(self):
        state = make_state()
        data = _tiny_dataset(state, n=3)
        memories = extract_all_memories(state, data)
        for m, fused in zip(memories, data.fused):
            assert np.array_equal(m, forward_memory(state, fused))


class TestMemoryReduce:
    def test_round0_is_mean(self, rng):
        a = f64(rng.child(1), (2, 2, 2))
        b = f64(rng.child(2), (2, 2, 2))
        out = memory_reduce([a, b], None, 0)
        assert max_rel_err(out.data, (a + b) / 2) < 1e-6

    def test_hand_scalar_case(self):
        a = np.full((1, 1, 1), 1.0, dtype=np.float32)
        b = np.full((1, 1, 1), 3.0, dtype=np.float32)
        prev = MemoryBank(data=np.zeros((1, 1, 1), dtype=np.float32), round_index=0)
        out = memory_reduce([a, b], prev, 1)
        # weights (1, 3) -> weighted mean 2.5; alpha=1/2 blends with prev 0
        assert out.data[0, 0, 0] == 1.25

    def test_round1_alpha_is_half(self, rng):
        mems = [f64(rng.child(i), (2, 2, 2)) for i in range(3)]
        prev = MemoryBank(data=f64(rng.child(9), (2, 2, 2)).astype(np.float32))
        out = memory_reduce(mems, prev, 1)
        w = np.array([np.linalg.norm(m - prev.data) for m in mems])
        mbar = np.tensordot(w, np.stack(mems), axes=1) / w.sum()
        expected = 0.5 * mbar + 0.5 * prev.data
        assert max_rel_err(out.data, expected) < 1e-6

    def test_rema_alpha_schedule(self, rng):
        mems = [f64(rng.child(i), (1, 1, 1)) for i in range(2)]
        prev = MemoryBank(data=np.ones((1, 1, 1), dtype=np.float32))
        for t in (1, 2, 5):
            out = memory_reduce(mems, prev, t)
            w = np.array([abs(float(m.item() - prev.data.item())) for m in mems])
            mbar = float((w * np.array([m.item() for m in mems])).sum() / w.sum())
            alpha = 1.0 / (t + 1)
            assert out.data[0, 0, 0] == pytest.approx(alpha * mbar + (1 - alpha) * 1.0,
                                                      rel=1e-6)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_permutation_invariant(self, seed):
        r = Rng(seed)
        mems = [r.child(i).normal((2, 2, 3)) for i in range(5)]
        prev = MemoryBank(data=r.child(99).normal((2, 2, 3)))
        perm = r.child(50).permutation(5)
        out_a = memory_reduce(mems, prev, 2)
        out_b = memory_reduce([mems[i] for i in perm], prev, 2)
        assert max_rel_err(out_a.data, out_b.data) < 1e-5

    def test_weight_monotonicity(self):
        # scaling one memory's distance up never lowers its relative pull
        prev = MemoryBank(data=np.zeros((1, 1, 1), dtype=np.float32))
        near = np.full((1, 1, 1), 0.5)
        far = np.full((1, 1, 1), 2.0)
        farther = np.full((1, 1, 1), 4.0)
        base = memory_reduce([near, far], prev, 1).data.item()
        moved = memory_reduce([near, farther], prev, 1).data.item()
        assert moved > base

    def test_degenerate_zero_weights_fall_back_uniform(self):
        prev = MemoryBank(data=np.ones((1, 1, 2), dtype=np.float32))
        mems = [prev.data.copy(), prev.data.copy()]
        out = memory_reduce(mems, prev, 3)
        assert np.allclose(out.data, 1.0)

    def test_round0_rejects_prev(self, rng):
        with pytest.raises(ValueError):
            memory_reduce([rng.normal((1, 1, 1))], make_bank(rng, 1, 1, 1), 0)

    def test_later_round_requires_prev(self, rng):
        with pytest.raises(ValueError):
            memory_reduce([rng.normal((1, 1, 1))], None, 2)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            memory_reduce([], None, 0)

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(ShapeError):
            memory_reduce([rng.normal((1, 1, 1)), rng.normal((1, 1, 2))], None, 0)
